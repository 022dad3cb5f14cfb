"""Small rotation helpers: rotation vectors, quaternions and the SO(3) left Jacobian."""

import numpy as np
from scipy.spatial.transform import Rotation


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(rotvec):
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix()


def axis_angle_matrix(axis, angle):
    """Rotation matrix for ``angle`` radians about the unit vector ``axis``."""
    axis = np.asarray(axis, dtype=float)
    return Rotation.from_rotvec(axis * angle).as_matrix()


def uniform_quaternion(rng):
    """Uniformly distributed unit quaternion (x, y, z, w), Shoemake's method."""
    u1, u2, u3 = rng.random(3)
    a = np.sqrt(1.0 - u1)
    b = np.sqrt(u1)
    return np.array([
        a * np.sin(2.0 * np.pi * u2),
        a * np.cos(2.0 * np.pi * u2),
        b * np.sin(2.0 * np.pi * u3),
        b * np.cos(2.0 * np.pi * u3),
    ])


def uniform_rotvec(rng):
    return Rotation.from_quat(uniform_quaternion(rng)).as_rotvec()


def left_jacobian(rotvec):
    """Left Jacobian J of the exponential map.

    ``exp(w + dw) ~= exp(J(w) dw) exp(w)``, so a gradient with respect to a
    small left-multiplied rotation (a torque) maps to the rotation-vector
    gradient through ``J(w).T``.
    """
    w = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    t2 = theta * theta
    if theta < 1e-2:
        # series for both coefficients; the closed forms cancel badly here
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2 ** 3 / 40320.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 ** 3 / 362880.0
    else:
        a = 2.0 * np.sin(0.5 * theta) ** 2 / t2
        b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * K + b * (K @ K)
