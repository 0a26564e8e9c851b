#pragma once

#include "uecrl/config.hpp"
#include "uecrl/error.hpp"
#include "uecrl/format.hpp"
#include "uecrl/metrics.hpp"
#include "uecrl/objective.hpp"
#include "uecrl/policy.hpp"
#include "uecrl/policy_io.hpp"
#include "uecrl/random.hpp"
#include "uecrl/rollout.hpp"
#include "uecrl/sweep.hpp"
#include "uecrl/tasks.hpp"
#include "uecrl/theory.hpp"
#include "uecrl/trainer.hpp"
#include "uecrl/uec.hpp"
