#pragma once

#include "vlhmm/bench.hpp"
#include "vlhmm/brown.hpp"
#include "vlhmm/checkpoint.hpp"
#include "vlhmm/config.hpp"
#include "vlhmm/corpus.hpp"
#include "vlhmm/eval.hpp"
#include "vlhmm/gradcheck.hpp"
#include "vlhmm/hmm.hpp"
#include "vlhmm/params.hpp"
#include "vlhmm/rng.hpp"
#include "vlhmm/tensor.hpp"
#include "vlhmm/trainer.hpp"
