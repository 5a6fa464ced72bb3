#pragma once

#include "cyclecl/anomkit.hpp"
#include "cyclecl/checkpoint.hpp"
#include "cyclecl/core.hpp"
#include "cyclecl/evalkit.hpp"
#include "cyclecl/harness.hpp"
#include "cyclecl/miner.hpp"
#include "cyclecl/seqdata.hpp"
#include "cyclecl/simhead.hpp"
#include "cyclecl/trainer.hpp"
#include "cyclecl/tsmkit.hpp"
