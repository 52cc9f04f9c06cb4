#pragma once

#include "diffprune/budget.hpp"
#include "diffprune/checkpoint.hpp"
#include "diffprune/clustering.hpp"
#include "diffprune/config.hpp"
#include "diffprune/data.hpp"
#include "diffprune/denoiser.hpp"
#include "diffprune/diffusion.hpp"
#include "diffprune/elastic.hpp"
#include "diffprune/era.hpp"
#include "diffprune/error.hpp"
#include "diffprune/metrics.hpp"
#include "diffprune/ops.hpp"
#include "diffprune/optim.hpp"
#include "diffprune/pipeline.hpp"
#include "diffprune/report.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/tensor.hpp"
