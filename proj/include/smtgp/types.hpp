#pragma once

#include <Eigen/Dense>

namespace smtgp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

}  // namespace smtgp
