#pragma once

// Per-demonstration template parameters that put the demonstration exactly
// on the satisfaction boundary.

#include <vector>

#include "stldp/dynamics.hpp"
#include "stldp/scene.hpp"

namespace stldp {

/// Start of the suffix used for lane-change bounds: the earliest step from
/// which the ego stays strictly closer to the target lane than to the current
/// one (T when that never happens).
int lane_change_onset(const stl::Signal& s, Mode mode);

/// Tightest gamma for the demo under the given mode. Throws DataError for an
/// empty trajectory or a mode whose lane is invalid.
StlParams calibrate_params(const StateMatrix& states, const SceneContext& c, Mode mode);

/// Loosest bounds over the entries of `mode` in a calibrated corpus (min of
/// lower bounds and d_safe, max of upper bounds); all entries if none has
/// that mode. Throws DataError when empty.
StlParams envelope(const std::vector<StlParams>& corpus, Mode mode);

/// d_coll = closest approach to the robot; r_goal is the scenario constant.
HriParams calibrate_hri(const StateMatrix& states, const HriScene& c);

}  // namespace stldp
