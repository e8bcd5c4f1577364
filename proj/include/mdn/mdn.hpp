#pragma once

#include "mdn/bench.hpp"
#include "mdn/bpe.hpp"
#include "mdn/checkpoint.hpp"
#include "mdn/config.hpp"
#include "mdn/distill.hpp"
#include "mdn/error.hpp"
#include "mdn/infer.hpp"
#include "mdn/kernels.hpp"
#include "mdn/model.hpp"
#include "mdn/ops.hpp"
#include "mdn/optim.hpp"
#include "mdn/profile.hpp"
#include "mdn/tensor.hpp"
#include "mdn/train.hpp"
