#pragma once

#include "dmfa/conditional.hpp"
#include "dmfa/dmfa.hpp"
#include "dmfa/error.hpp"
#include "dmfa/eval.hpp"
#include "dmfa/lowrank_gauss.hpp"
#include "dmfa/masking.hpp"
#include "dmfa/mfa.hpp"
#include "dmfa/nn.hpp"
#include "dmfa/optim.hpp"
#include "dmfa/parallel.hpp"
#include "dmfa/rng.hpp"
#include "dmfa/tensorio.hpp"
#include "dmfa/trainer.hpp"
