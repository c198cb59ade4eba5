#pragma once

// AM-ST: adaptive-masking sentiment transfer toolkit. Single include for the
// whole library.

#include "amst/common.hpp"
#include "amst/rng.hpp"
#include "amst/tensor.hpp"
#include "amst/nn.hpp"
#include "amst/corpus.hpp"
#include "amst/grammar.hpp"
#include "amst/mask_model.hpp"
#include "amst/disentangle.hpp"
#include "amst/cnn_classifier.hpp"
#include "amst/senti_mlm.hpp"
#include "amst/checkpoint.hpp"
#include "amst/trainer.hpp"
#include "amst/config.hpp"
#include "amst/evalsuite.hpp"
