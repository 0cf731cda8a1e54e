#pragma once

#include "ambert/analysis.hpp"
#include "ambert/checkpoint.hpp"
#include "ambert/common.hpp"
#include "ambert/config.hpp"
#include "ambert/data.hpp"
#include "ambert/finetune.hpp"
#include "ambert/inference.hpp"
#include "ambert/model.hpp"
#include "ambert/optim.hpp"
#include "ambert/params.hpp"
#include "ambert/pretrain.hpp"
#include "ambert/tensor.hpp"
#include "ambert/tokenizer.hpp"
#include "ambert/unicode.hpp"
#include "ambert/vocab.hpp"
