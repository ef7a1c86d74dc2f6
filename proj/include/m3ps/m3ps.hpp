#pragma once

// Umbrella header.
#include "m3ps/tensor.hpp"
#include "m3ps/autodiff.hpp"
#include "m3ps/nn.hpp"
#include "m3ps/datamodel.hpp"
#include "m3ps/tokens.hpp"
#include "m3ps/synth.hpp"
#include "m3ps/config.hpp"
#include "m3ps/encoders.hpp"
#include "m3ps/fusion.hpp"
#include "m3ps/decoder.hpp"
#include "m3ps/objectives.hpp"
#include "m3ps/metrics.hpp"
#include "m3ps/model.hpp"
#include "m3ps/train_config.hpp"
#include "m3ps/checkpoint.hpp"
#include "m3ps/harness.hpp"
