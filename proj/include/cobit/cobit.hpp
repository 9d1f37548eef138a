#pragma once

#include "cobit/checkpoint.hpp"
#include "cobit/codebook.hpp"
#include "cobit/config.hpp"
#include "cobit/grad_check.hpp"
#include "cobit/image_io.hpp"
#include "cobit/inference.hpp"
#include "cobit/masks.hpp"
#include "cobit/model.hpp"
#include "cobit/objectives.hpp"
#include "cobit/ops.hpp"
#include "cobit/optimizer.hpp"
#include "cobit/parameters.hpp"
#include "cobit/random.hpp"
#include "cobit/synthetic.hpp"
#include "cobit/tensor.hpp"
#include "cobit/tokenizer.hpp"
#include "cobit/training.hpp"
#include "cobit/transformer.hpp"
