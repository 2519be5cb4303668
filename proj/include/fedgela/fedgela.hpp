#pragma once

#include "fedgela/config.hpp"
#include "fedgela/data.hpp"
#include "fedgela/error.hpp"
#include "fedgela/etf.hpp"
#include "fedgela/experiment.hpp"
#include "fedgela/fed.hpp"
#include "fedgela/io.hpp"
#include "fedgela/metrics.hpp"
#include "fedgela/nn.hpp"
#include "fedgela/rng.hpp"
