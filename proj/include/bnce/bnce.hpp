#pragma once

#include "bnce/tensor.hpp"
#include "bnce/rng.hpp"
#include "bnce/io.hpp"
#include "bnce/corpus.hpp"
#include "bnce/synthetic.hpp"
#include "bnce/model.hpp"
#include "bnce/output_head.hpp"
#include "bnce/config.hpp"
#include "bnce/checkpoint.hpp"
#include "bnce/eval.hpp"
#include "bnce/trainer.hpp"
#include "bnce/bench.hpp"
