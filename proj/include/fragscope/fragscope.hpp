#pragma once

#include "fragscope/text.hpp"
#include "fragscope/trace.hpp"
#include "fragscope/placement.hpp"
#include "fragscope/backend.hpp"
#include "fragscope/simulate.hpp"
#include "fragscope/live.hpp"
#include "fragscope/binpack.hpp"
#include "fragscope/fragmentation.hpp"
#include "fragscope/analysis.hpp"
