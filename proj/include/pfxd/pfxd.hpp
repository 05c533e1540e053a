#pragma once

#include "pfxd/binary_io.hpp"
#include "pfxd/checkpoint.hpp"
#include "pfxd/config.hpp"
#include "pfxd/data.hpp"
#include "pfxd/decode.hpp"
#include "pfxd/denoiser.hpp"
#include "pfxd/diffusion.hpp"
#include "pfxd/error.hpp"
#include "pfxd/layers.hpp"
#include "pfxd/metrics.hpp"
#include "pfxd/parallel.hpp"
#include "pfxd/rng.hpp"
#include "pfxd/schedule.hpp"
#include "pfxd/tensor.hpp"
#include "pfxd/training.hpp"
#include "pfxd/vocab.hpp"
