// Umbrella header for the library (the CLI front end lives in cli.hpp).
#pragma once

#include "bayes.hpp"
#include "core.hpp"
#include "io.hpp"
#include "metrics.hpp"
#include "multiscale.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "simulate.hpp"
#include "unroll/layers.hpp"
#include "unroll/network.hpp"
#include "unroll/train.hpp"
#include "unroll/weights_io.hpp"
