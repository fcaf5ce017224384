#pragma once

#include "regmarket/error.hpp"
#include "regmarket/random.hpp"
#include "regmarket/dataset.hpp"
#include "regmarket/bayes.hpp"
#include "regmarket/lift.hpp"
#include "regmarket/allocation.hpp"
#include "regmarket/market.hpp"
#include "regmarket/attack.hpp"
#include "regmarket/experiment.hpp"
