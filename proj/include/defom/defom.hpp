#pragma once

#include "defom/correlation.hpp"
#include "defom/dataio.hpp"
#include "defom/depth_provider.hpp"
#include "defom/encoders.hpp"
#include "defom/evalkit.hpp"
#include "defom/random.hpp"
#include "defom/scene_synth.hpp"
#include "defom/tensor.hpp"
#include "defom/updater.hpp"
