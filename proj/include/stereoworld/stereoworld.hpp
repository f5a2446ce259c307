#pragma once

// Umbrella header.

#include "stereoworld/autodiff.hpp"
#include "stereoworld/cli.hpp"
#include "stereoworld/codec.hpp"
#include "stereoworld/config.hpp"
#include "stereoworld/datapipe.hpp"
#include "stereoworld/evalsuite.hpp"
#include "stereoworld/flowmatch.hpp"
#include "stereoworld/geometry.hpp"
#include "stereoworld/image_io.hpp"
#include "stereoworld/manifest.hpp"
#include "stereoworld/rng.hpp"
#include "stereoworld/scenegen.hpp"
#include "stereoworld/stereonet.hpp"
#include "stereoworld/tensor.hpp"
#include "stereoworld/tensor_file.hpp"
#include "stereoworld/tiler.hpp"
#include "stereoworld/trainer.hpp"
