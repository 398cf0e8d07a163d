#pragma once

#include "dynast/numerics/autograd.hpp"
#include "dynast/numerics/dump.hpp"
#include "dynast/numerics/errors.hpp"
#include "dynast/numerics/gradcheck.hpp"
#include "dynast/numerics/layers.hpp"
#include "dynast/numerics/linalg.hpp"
#include "dynast/numerics/norm.hpp"
#include "dynast/numerics/ops.hpp"
#include "dynast/numerics/resize.hpp"
#include "dynast/numerics/rng.hpp"
#include "dynast/numerics/softmax.hpp"
#include "dynast/numerics/tensor.hpp"
