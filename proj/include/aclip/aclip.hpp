#pragma once

#include "aclip/attnmask.hpp"
#include "aclip/common.hpp"
#include "aclip/dataio.hpp"
#include "aclip/encoders.hpp"
#include "aclip/evalkit.hpp"
#include "aclip/image.hpp"
#include "aclip/losses.hpp"
#include "aclip/model.hpp"
#include "aclip/tensor.hpp"
#include "aclip/trainer.hpp"
