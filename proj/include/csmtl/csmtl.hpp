#pragma once

#include "csmtl/errors.hpp"
#include "csmtl/rng.hpp"
#include "csmtl/tensor.hpp"
#include "csmtl/tape.hpp"
#include "csmtl/ops.hpp"
#include "csmtl/batchnorm.hpp"
#include "csmtl/network.hpp"
#include "csmtl/strength.hpp"
#include "csmtl/projection.hpp"
#include "csmtl/optimizers.hpp"
#include "csmtl/loss_scaling.hpp"
#include "csmtl/evaluation.hpp"
#include "csmtl/quadratic.hpp"
#include "csmtl/oracles.hpp"
#include "csmtl/synthetic.hpp"
#include "csmtl/gradcheck.hpp"
#include "csmtl/serialization.hpp"
#include "csmtl/experiment.hpp"
#include "csmtl/verification.hpp"
