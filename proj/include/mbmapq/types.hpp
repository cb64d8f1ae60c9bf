#pragma once

#include <Eigen/Dense>

namespace mbmapq {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

}  // namespace mbmapq
