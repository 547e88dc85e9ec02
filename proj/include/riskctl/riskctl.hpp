#pragma once

#include "riskctl/core.hpp"
#include "riskctl/dual_cg.hpp"
#include "riskctl/dynsys.hpp"
#include "riskctl/leqg.hpp"
#include "riskctl/montecarlo.hpp"
#include "riskctl/parallel.hpp"
#include "riskctl/random.hpp"
#include "riskctl/reference.hpp"
#include "riskctl/solver.hpp"
#include "riskctl/surrogate.hpp"
#include "riskctl/systems.hpp"
