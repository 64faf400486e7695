#pragma once

#include "attnmod/error.hpp"
#include "attnmod/tensor.hpp"
#include "attnmod/safetensors.hpp"
#include "attnmod/config.hpp"
#include "attnmod/tokenizer.hpp"
#include "attnmod/model.hpp"
#include "attnmod/image.hpp"
#include "attnmod/runtime.hpp"
#include "attnmod/concepts.hpp"
#include "attnmod/samd.hpp"
#include "attnmod/sami.hpp"
#include "attnmod/evalkit.hpp"
#include "attnmod/planted.hpp"
