#pragma once

#include "dynast/harness/bench.hpp"
#include "dynast/harness/gradcheck_suite.hpp"
#include "dynast/harness/image_io.hpp"
#include "dynast/harness/metrics.hpp"
#include "dynast/harness/toy_data.hpp"
#include "dynast/harness/train.hpp"
#include "dynast/harness/warp_viz.hpp"
