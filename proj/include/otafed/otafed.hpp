#pragma once

#include "otafed/channel.hpp"
#include "otafed/experiment.hpp"
#include "otafed/federation.hpp"
#include "otafed/model.hpp"
#include "otafed/optimizer.hpp"
#include "otafed/rng.hpp"
