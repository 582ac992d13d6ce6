#pragma once

#include "bitnet_a48/tensor.hpp"
#include "bitnet_a48/quant.hpp"
#include "bitnet_a48/kernels.hpp"
#include "bitnet_a48/sparsify.hpp"
#include "bitnet_a48/ste.hpp"
#include "bitnet_a48/layers.hpp"
#include "bitnet_a48/model.hpp"
#include "bitnet_a48/data.hpp"
#include "bitnet_a48/train.hpp"
#include "bitnet_a48/metrics.hpp"
#include "bitnet_a48/io.hpp"
#include "bitnet_a48/cli.hpp"
