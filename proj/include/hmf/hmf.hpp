#pragma once

#include "common.hpp"
#include "data.hpp"
#include "synthetic.hpp"
#include "sgd.hpp"
#include "cost_model.hpp"
#include "partition.hpp"
#include "scheduler.hpp"
#include "workers.hpp"
#include "calibration.hpp"
#include "simulate.hpp"
#include "trainer.hpp"
