#pragma once

#include "mfdelay/errors.hpp"
#include "mfdelay/segment_space.hpp"
#include "mfdelay/rng.hpp"
#include "mfdelay/parallel.hpp"
#include "mfdelay/stats.hpp"
#include "mfdelay/model.hpp"
#include "mfdelay/models.hpp"
#include "mfdelay/forward_sim.hpp"
#include "mfdelay/variation.hpp"
#include "mfdelay/regression.hpp"
#include "mfdelay/adjoint.hpp"
#include "mfdelay/tensor.hpp"
#include "mfdelay/smp.hpp"
#include "mfdelay/config.hpp"
#include "mfdelay/report.hpp"
#include "mfdelay/harness.hpp"
