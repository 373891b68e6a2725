#pragma once

#include "lrq/checkpoint.hpp"
#include "lrq/common.hpp"
#include "lrq/config.hpp"
#include "lrq/data.hpp"
#include "lrq/generator.hpp"
#include "lrq/losses.hpp"
#include "lrq/model.hpp"
#include "lrq/ops.hpp"
#include "lrq/optim.hpp"
#include "lrq/quantize.hpp"
#include "lrq/tensor.hpp"
#include "lrq/train.hpp"
