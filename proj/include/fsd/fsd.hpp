#pragma once

#include "fsd/checkpoint.hpp"
#include "fsd/dataset.hpp"
#include "fsd/errors.hpp"
#include "fsd/eval.hpp"
#include "fsd/image.hpp"
#include "fsd/network.hpp"
#include "fsd/network_config.hpp"
#include "fsd/optim.hpp"
#include "fsd/protonet.hpp"
#include "fsd/rng.hpp"
#include "fsd/run_config.hpp"
#include "fsd/sampler.hpp"
#include "fsd/types.hpp"
