#pragma once

#include "optin/brute_force.hpp"
#include "optin/cnn.hpp"
#include "optin/config.hpp"
#include "optin/container.hpp"
#include "optin/cost.hpp"
#include "optin/error.hpp"
#include "optin/eval.hpp"
#include "optin/importance.hpp"
#include "optin/json_io.hpp"
#include "optin/model.hpp"
#include "optin/pipeline.hpp"
#include "optin/prune.hpp"
#include "optin/search.hpp"
#include "optin/tensor.hpp"
#include "optin/token_merge.hpp"
#include "optin/toy.hpp"
