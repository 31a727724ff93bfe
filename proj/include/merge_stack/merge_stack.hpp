#pragma once

#include "merge_stack/config_text.hpp"
#include "merge_stack/geometry.hpp"
#include "merge_stack/lateral.hpp"
#include "merge_stack/longitudinal.hpp"
#include "merge_stack/qp.hpp"
#include "merge_stack/reachability.hpp"
#include "merge_stack/scenario.hpp"
#include "merge_stack/sequencer.hpp"
#include "merge_stack/simulation.hpp"
#include "merge_stack/stability.hpp"
