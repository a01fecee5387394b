#pragma once

// Single include for the whole library.

#include "cohff/bytes.hpp"
#include "cohff/checkpoint.hpp"
#include "cohff/common.hpp"
#include "cohff/deform_attn.hpp"
#include "cohff/fusion.hpp"
#include "cohff/grid.hpp"
#include "cohff/ground_truth.hpp"
#include "cohff/harness.hpp"
#include "cohff/io.hpp"
#include "cohff/losses.hpp"
#include "cohff/metrics.hpp"
#include "cohff/occupancy_net.hpp"
#include "cohff/ops.hpp"
#include "cohff/optim.hpp"
#include "cohff/planes.hpp"
#include "cohff/pose.hpp"
#include "cohff/raycast.hpp"
#include "cohff/scene.hpp"
#include "cohff/segmentation_net.hpp"
#include "cohff/tensor.hpp"
#include "cohff/v2x.hpp"
#include "cohff/wire.hpp"
