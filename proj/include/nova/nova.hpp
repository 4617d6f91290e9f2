#pragma once

#include "nova/errors.hpp"
#include "nova/parallel.hpp"
#include "nova/rng.hpp"
#include "nova/diffcore.hpp"
#include "nova/image_ops.hpp"
#include "nova/gradcheck.hpp"
#include "nova/checkpoint.hpp"
#include "nova/geometry.hpp"
#include "nova/triplane.hpp"
#include "nova/fusion.hpp"
#include "nova/encoder.hpp"
#include "nova/render.hpp"
#include "nova/losses.hpp"
#include "nova/image_io.hpp"
#include "nova/scenes.hpp"
#include "nova/metrics.hpp"
#include "nova/config.hpp"
#include "nova/trainer.hpp"
