#pragma once

#include "emofuse/errors.hpp"
#include "emofuse/tensor.hpp"
#include "emofuse/random.hpp"
#include "emofuse/ops.hpp"
#include "emofuse/gradcheck.hpp"
#include "emofuse/tokenizer.hpp"
#include "emofuse/encoder.hpp"
#include "emofuse/heads.hpp"
#include "emofuse/training.hpp"
#include "emofuse/data.hpp"
#include "emofuse/metrics.hpp"
#include "emofuse/experiments.hpp"
#include "emofuse/report.hpp"
