// Umbrella header for the subcurve library.
#pragma once

#include "subcurve/autodiff.hpp"
#include "subcurve/curvature.hpp"
#include "subcurve/data.hpp"
#include "subcurve/diagnostics.hpp"
#include "subcurve/linalg.hpp"
#include "subcurve/model.hpp"
#include "subcurve/optimizers.hpp"
#include "subcurve/plot.hpp"
#include "subcurve/rng.hpp"
