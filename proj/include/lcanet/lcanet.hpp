#pragma once

#include "lcanet/ablation.hpp"
#include "lcanet/attention.hpp"
#include "lcanet/bbox.hpp"
#include "lcanet/config.hpp"
#include "lcanet/data.hpp"
#include "lcanet/evaluation.hpp"
#include "lcanet/grad_check.hpp"
#include "lcanet/local_context.hpp"
#include "lcanet/network.hpp"
#include "lcanet/objectives.hpp"
#include "lcanet/ops.hpp"
#include "lcanet/parameter.hpp"
#include "lcanet/random.hpp"
#include "lcanet/serialize.hpp"
#include "lcanet/tensor.hpp"
#include "lcanet/training.hpp"
