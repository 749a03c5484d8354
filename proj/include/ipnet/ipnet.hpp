#pragma once

#include "ipnet/autodiff.hpp"      // IWYU pragma: export
#include "ipnet/bias_labeler.hpp"  // IWYU pragma: export
#include "ipnet/dataset.hpp"       // IWYU pragma: export
#include "ipnet/errors.hpp"        // IWYU pragma: export
#include "ipnet/evaluation.hpp"    // IWYU pragma: export
#include "ipnet/fusion.hpp"        // IWYU pragma: export
#include "ipnet/geometry.hpp"      // IWYU pragma: export
#include "ipnet/imu_model.hpp"     // IWYU pragma: export
#include "ipnet/model.hpp"         // IWYU pragma: export
#include "ipnet/optim.hpp"         // IWYU pragma: export
#include "ipnet/pipeline.hpp"      // IWYU pragma: export
#include "ipnet/preintegration.hpp"  // IWYU pragma: export
