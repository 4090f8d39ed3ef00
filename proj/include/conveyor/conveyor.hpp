#pragma once

#include "cloudsim.hpp"
#include "config.hpp"
#include "errors.hpp"
#include "fieldkit.hpp"
#include "io.hpp"
#include "lossmodel.hpp"
#include "motionplan.hpp"
#include "pipeline.hpp"
#include "trapsolve.hpp"
#include "units.hpp"
