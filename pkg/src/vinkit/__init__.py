"""vinkit: visual-inertial estimation toolkit.

Submodules
----------
manifold   quaternion / SO(3) algebra and generic boxplus/boxminus
imu        measurement model, propagation, preintegration, covariance
camera     pinhole chain, back-projection, geometric and photometric residuals
ekf        error-state EKF with landmarks in the state
smoother   fixed-lag factor-graph smoother with Schur marginalization
sim        deterministic synthetic world
metrics    alignment, ATE, RPE, NEES
cli        ``vinkit simulate | run | evaluate | selftest``
"""

__version__ = "0.1.0"
