#pragma once

#include "analytics.hpp"
#include "backends.hpp"
#include "core.hpp"
#include "prompt.hpp"
#include "report.hpp"
#include "runner.hpp"
