#pragma once

#include "dose3/container.hpp"
#include "dose3/data_io.hpp"
#include "dose3/diffusion.hpp"
#include "dose3/dual.hpp"
#include "dose3/error.hpp"
#include "dose3/eval.hpp"
#include "dose3/igso3.hpp"
#include "dose3/lie.hpp"
#include "dose3/nn/checkpoint.hpp"
#include "dose3/nn/ops.hpp"
#include "dose3/nn/optim.hpp"
#include "dose3/nn/tensor.hpp"
#include "dose3/nn/unet.hpp"
#include "dose3/ood.hpp"
#include "dose3/pose.hpp"
#include "dose3/rng.hpp"
#include "dose3/training.hpp"
