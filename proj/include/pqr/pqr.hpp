#pragma once

#include "pqr/errors.hpp"
#include "pqr/tensor.hpp"
#include "pqr/autograd.hpp"
#include "pqr/schedule.hpp"
#include "pqr/vocab.hpp"
#include "pqr/weights.hpp"
#include "pqr/adapters.hpp"
#include "pqr/autoencoder.hpp"
#include "pqr/model.hpp"
#include "pqr/sampler.hpp"
#include "pqr/checkpoint.hpp"
#include "pqr/image_io.hpp"
#include "pqr/corpus.hpp"
#include "pqr/features.hpp"
#include "pqr/matching.hpp"
#include "pqr/losses.hpp"
#include "pqr/train.hpp"
#include "pqr/refine.hpp"
#include "pqr/eval.hpp"
#include "pqr/config.hpp"
