#pragma once

#include "mfgen/autodiff.hpp"
#include "mfgen/cnf.hpp"
#include "mfgen/dynamics.hpp"
#include "mfgen/error.hpp"
#include "mfgen/experiment.hpp"
#include "mfgen/hamiltonian.hpp"
#include "mfgen/losses.hpp"
#include "mfgen/metrics.hpp"
#include "mfgen/mfg_verify.hpp"
#include "mfgen/targets.hpp"
#include "mfgen/trainer.hpp"
#include "mfgen/wgf.hpp"
