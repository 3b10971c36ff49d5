#pragma once

// Hand-built scene fixtures.

#include <cmath>

#include "stldp/scene.hpp"

namespace fixtures {

using namespace stldp;

// Straight lane along +x at lateral offset y, waypoints every 6 m starting at x0.
inline Lane straight_lane(double y, double x0 = -24.0, double spacing = 6.0) {
  Lane l;
  l.valid = true;
  for (int i = 0; i < kLanePoints; ++i) l.pts[i] = {x0 + spacing * i, y, 0.0};
  return l;
}

// Three-lane straight road, ego on the center lane at the origin.
inline SceneContext three_lane_road(double v = 5.0) {
  SceneContext c;
  c.id = "road";
  c.ego = {0.0, 0.0, 0.0, v};
  c.lanes[kLaneCurrent] = straight_lane(0.0);
  c.lanes[kLaneLeft] = straight_lane(3.6);
  c.lanes[kLaneRight] = straight_lane(-3.6);
  return c;
}

inline Neighbor car(double x, double y, double theta = 0.0, double v = 0.0) {
  Neighbor n;
  n.valid = true;
  n.x = x;
  n.y = y;
  n.theta = theta;
  n.v = v;
  return n;
}

}  // namespace fixtures
