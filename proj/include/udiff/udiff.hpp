#pragma once

#include "udiff/rng.hpp"
#include "udiff/model_base.hpp"
#include "udiff/models/ou.hpp"
#include "udiff/models/logistic.hpp"
#include "udiff/models/gridcell.hpp"
#include "udiff/sde_grid.hpp"
#include "udiff/functional.hpp"
#include "udiff/resampling.hpp"
#include "udiff/csmc.hpp"
#include "udiff/estimators.hpp"
#include "udiff/drivers.hpp"
#include "udiff/oracles.hpp"
