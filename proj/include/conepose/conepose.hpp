#pragma once

#include "conepose/binary_io.hpp"
#include "conepose/cone_model.hpp"
#include "conepose/config.hpp"
#include "conepose/error.hpp"
#include "conepose/experiments.hpp"
#include "conepose/geometry.hpp"
#include "conepose/keypoint_loss.hpp"
#include "conepose/nn.hpp"
#include "conepose/patch.hpp"
#include "conepose/pipeline.hpp"
#include "conepose/pnp.hpp"
#include "conepose/random.hpp"
#include "conepose/regressor.hpp"
#include "conepose/stereo.hpp"
#include "conepose/synthetic.hpp"
