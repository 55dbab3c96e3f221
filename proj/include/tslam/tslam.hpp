#pragma once

#include "tslam/error.hpp"
#include "tslam/tensor.hpp"
#include "tslam/quant.hpp"
#include "tslam/lora.hpp"
#include "tslam/sampling.hpp"
#include "tslam/tokenizer.hpp"
#include "tslam/model.hpp"
#include "tslam/train.hpp"
#include "tslam/datapipe.hpp"
#include "tslam/fetch.hpp"
#include "tslam/judge.hpp"
#include "tslam/config.hpp"
#include "tslam/checkpoint.hpp"
