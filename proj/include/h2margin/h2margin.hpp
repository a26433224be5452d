#pragma once

#include "h2margin/error.hpp"
#include "h2margin/network.hpp"
#include "h2margin/capability.hpp"
#include "h2margin/powerflow.hpp"
#include "h2margin/autodiff.hpp"
#include "h2margin/algebraic_model.hpp"
#include "h2margin/interior_point.hpp"
#include "h2margin/harvest_model.hpp"
#include "h2margin/harvest_solver.hpp"
#include "h2margin/experiment.hpp"
