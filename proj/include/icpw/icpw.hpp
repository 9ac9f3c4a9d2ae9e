#pragma once

#include "icpw/baselines.hpp"
#include "icpw/cmle.hpp"
#include "icpw/cond_prob.hpp"
#include "icpw/data_model.hpp"
#include "icpw/error.hpp"
#include "icpw/estimators.hpp"
#include "icpw/inference.hpp"
#include "icpw/parallel.hpp"
#include "icpw/report.hpp"
#include "icpw/selftest.hpp"
#include "icpw/simulate.hpp"
#include "icpw/version.hpp"
