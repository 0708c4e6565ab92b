#pragma once

#include "rrnet/tensor.hpp"
#include "rrnet/ops.hpp"
#include "rrnet/graph.hpp"
#include "rrnet/presets.hpp"
#include "rrnet/train_config.hpp"
#include "rrnet/config.hpp"
#include "rrnet/unroll.hpp"
#include "rrnet/param_store.hpp"
#include "rrnet/executor.hpp"
#include "rrnet/dynamics.hpp"
#include "rrnet/cifar.hpp"
#include "rrnet/trainer.hpp"
