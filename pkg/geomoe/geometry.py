"""Classical two-view geometry on normalized image coordinates."""
from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass
from itertools import combinations
import logging

import numpy as np
from scipy.spatial.transform import Rotation

from .const import (
    CANONICAL_SIGN_TOLERANCE,
    COLLINEAR_AREA_TOLERANCE,
    EIGEN_GAP_TOLERANCE,
    ESSENTIAL_SAMPLE_SIZE,
    HOMOGENEOUS_W_TOLERANCE,
    HOMOGRAPHY_SAMPLE_SIZE,
    PARALLEL_RAY_ANGLE,
    WEIGHT_FLOOR,
)
from .exceptions import (
    CheiralityException,
    DegenerateConfigurationException,
    InvalidInputException,
    RankDeficientException,
)
from .helpers import check_finite
from .models import (
    CameraIntrinsics,
    Correspondence,
    CorrespondenceSet,
    EssentialMatrix,
    Homography,
    MotionVector,
    RelativePose,
)

_LOGGER = logging.getLogger(__name__)

Correspondences = CorrespondenceSet | Iterable[Correspondence]

# Four-point subsets are enumerated up to this many points
_EXHAUSTIVE_COLLINEAR_LIMIT = 8
_QUAD_TRIPLES = np.array(list(combinations(range(4), 3)))

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Triangulation:
    """Midpoint triangulation of one correspondence."""

    point: np.ndarray
    depth1: float
    depth2: float
    reliable: bool


def coordinates(corrs: Correspondences) -> tuple[np.ndarray, np.ndarray]:
    """Return the (x, x') coordinate arrays of a correspondence collection."""
    if isinstance(corrs, CorrespondenceSet):
        return corrs.x, corrs.x_prime

    corrs = list(corrs)
    x = np.array([c.x for c in corrs], dtype=np.float64).reshape(-1, 2)
    x_prime = np.array([c.x_prime for c in corrs], dtype=np.float64).reshape(-1, 2)
    check_finite(np.hstack([x, x_prime]), "correspondence coordinate")
    return x, x_prime


def homogeneous(points: np.ndarray) -> np.ndarray:
    """Lift N x 2 points to N x 3 homogeneous points with unit last entry."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.hstack([points, np.ones((len(points), 1))])


def skew(vector: np.ndarray) -> np.ndarray:
    """Return the cross-product matrix [v]x."""
    a, b, c = np.asarray(vector, dtype=np.float64)
    return np.array([[0.0, -c, b], [c, 0.0, -a], [-b, a, 0.0]])


def normalize_points(
    pixels: np.ndarray | Iterable[Iterable[float]], intrinsics: CameraIntrinsics
) -> np.ndarray:
    """Map pixel coordinates to normalized coordinates through K^-1."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    check_finite(pixels, "pixel coordinate")
    lifted = np.linalg.solve(intrinsics.matrix, homogeneous(pixels).T).T
    return lifted[:, :2] / lifted[:, 2:]


def denormalize_points(
    points: np.ndarray | Iterable[Iterable[float]], intrinsics: CameraIntrinsics
) -> np.ndarray:
    """Map normalized coordinates back to pixels through K."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    check_finite(points, "normalized coordinate")
    lifted = homogeneous(points) @ intrinsics.matrix.T
    return lifted[:, :2] / lifted[:, 2:]


def motion_vectors(corrs: Correspondences) -> list[MotionVector]:
    """Return the anchor and displacement of every correspondence."""
    x, x_prime = coordinates(corrs)
    return [
        MotionVector(anchor=a.copy(), displacement=b - a) for a, b in zip(x, x_prime)
    ]


def epipolar_rows(x: np.ndarray, x_prime: np.ndarray) -> np.ndarray:
    """Return the N x 9 constraint rows kron([x';1], [x;1]) of x'^T E x = 0."""
    hx = homogeneous(x)
    hxp = homogeneous(x_prime)
    return (hxp[:, :, None] * hx[:, None, :]).reshape(-1, 9)


def canonical_essential(e: np.ndarray) -> np.ndarray:
    """Scale to unit Frobenius norm and make the first significant entry positive."""
    e = np.asarray(e, dtype=np.float64).reshape(3, 3)
    norm = np.linalg.norm(e)
    if norm == 0 or not np.isfinite(norm):
        raise DegenerateConfigurationException("Essential matrix has no direction")
    e = e / norm
    for value in e.flat:
        if abs(value) > CANONICAL_SIGN_TOLERANCE:
            if value < 0:
                e = -e
            break
    return e


def project_to_essential(e: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix to singular values (s, s, 0) with s the top-two mean."""
    u, s, vt = np.linalg.svd(np.asarray(e, dtype=np.float64).reshape(3, 3))
    sigma = (s[0] + s[1]) / 2
    return canonical_essential(u @ np.diag([sigma, sigma, 0.0]) @ vt)


def project_to_essential_backward(e: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Pull a cotangent of ``project_to_essential(e)`` back onto the 3x3 input.

    The projection equals +-(u1 v1^T + u2 v2^T) / sqrt(2), so only the rotation
    of the top-two singular subspaces contributes. The sign is locally constant.
    """
    e = np.asarray(e, dtype=np.float64).reshape(3, 3)
    u, s, vt = np.linalg.svd(e)
    if s[1] - s[2] <= EIGEN_GAP_TOLERANCE * max(s[0], np.finfo(np.float64).tiny):
        raise DegenerateConfigurationException(
            "Second and third singular values coincide"
        )
    frame = u[:, :2] @ vt[:2]
    sign = 1.0 if np.sum(project_to_essential(e) * frame) > 0 else -1.0
    h = u.T @ np.asarray(grad, dtype=np.float64).reshape(3, 3) @ vt.T
    h *= sign / np.sqrt(2)

    pulled = np.zeros((3, 3))
    pulled[0, 1] = (h[0, 1] - h[1, 0]) / (s[0] + s[1])
    pulled[1, 0] = -pulled[0, 1]
    for i in (0, 1):
        gap = s[i] ** 2 - s[2] ** 2
        pulled[2, i] = (h[2, i] * s[i] + h[i, 2] * s[2]) / gap
        pulled[i, 2] = (h[2, i] * s[2] + h[i, 2] * s[i]) / gap
    return u @ pulled @ vt


def essential_from_pose(pose: RelativePose) -> EssentialMatrix:
    """Return the canonical essential matrix [t]x R of a pose."""
    return EssentialMatrix(canonical_essential(skew(pose.translation) @ pose.rotation))


def _validate_weights(weights: np.ndarray | Iterable[float], count: int) -> np.ndarray:
    if not isinstance(weights, np.ndarray):
        weights = list(weights)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(weights) != count:
        raise InvalidInputException(f"Expected {count} weights, got {len(weights)}")
    check_finite(weights, "weight")
    if (weights < 0).any():
        raise InvalidInputException("Negative weight", int(np.argmax(weights < 0)))
    return weights


def weighted_normal_matrix(
    x: np.ndarray, x_prime: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (A, rows, row weights) with A = X^T W X over rows of positive weight."""
    rows = epipolar_rows(x, x_prime)
    active = weights > 0
    rows = rows[active]
    active_weights = weights[active]
    return rows.T @ (active_weights[:, None] * rows), rows, active_weights


def smallest_eigenvector(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (eigenvalues ascending, eigenvectors) after the eigen-gap check."""
    eigenvalues, eigenvectors = np.linalg.eigh(normal)
    scale = max(abs(eigenvalues[-1]), np.finfo(np.float64).tiny)
    if eigenvalues[1] - eigenvalues[0] <= EIGEN_GAP_TOLERANCE * scale:
        raise DegenerateConfigurationException(
            "Two smallest eigenvalues of the normal matrix coincide"
        )
    return eigenvalues, eigenvectors


def weighted_eight_point(
    corrs: Correspondences, weights: np.ndarray | Iterable[float]
) -> EssentialMatrix:
    """Estimate E minimizing sum_i w_i (x_i'^T E x_i)^2 over unit-norm E."""
    x, x_prime = coordinates(corrs)
    return estimate_essential(x, x_prime, _validate_weights(weights, len(x)))


def estimate_essential(
    x: np.ndarray, x_prime: np.ndarray, weights: np.ndarray
) -> EssentialMatrix:
    """Weighted eight-point on validated coordinate and weight arrays."""
    effective = int((weights > WEIGHT_FLOOR).sum())
    if effective < ESSENTIAL_SAMPLE_SIZE:
        raise RankDeficientException(
            f"Need {ESSENTIAL_SAMPLE_SIZE} correspondences above the weight floor, "
            f"got {effective}"
        )

    normal, _, _ = weighted_normal_matrix(x, x_prime, weights)
    _, eigenvectors = smallest_eigenvector(normal)
    return EssentialMatrix(project_to_essential(eigenvectors[:, 0].reshape(3, 3)))


def triangulate_points(
    x: np.ndarray, x_prime: np.ndarray, pose: RelativePose
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Midpoint-triangulate N correspondences; return (points, z1, z2, reliable)."""
    rotation = pose.rotation
    translation = pose.translation
    d1 = homogeneous(x)
    d2 = homogeneous(x_prime) @ rotation
    center2 = -rotation.T @ translation

    a = np.einsum("ij,ij->i", d1, d1)
    b = np.einsum("ij,ij->i", d1, d2)
    c = np.einsum("ij,ij->i", d2, d2)
    d = d1 @ center2
    e = d2 @ center2

    sine = np.linalg.norm(np.cross(d1, d2), axis=1) / np.sqrt(a * c)
    reliable = sine >= PARALLEL_RAY_ANGLE

    denom = np.where(reliable, a * c - b * b, 1.0)
    s = (c * d - b * e) / denom
    u = (b * d - a * e) / denom
    points = (s[:, None] * d1 + center2 + u[:, None] * d2) / 2

    depth1 = points[:, 2].copy()
    depth2 = (points @ rotation.T + translation)[:, 2]
    points[~reliable] = np.nan
    depth1[~reliable] = np.nan
    depth2[~reliable] = np.nan
    return points, depth1, depth2, reliable


def triangulate_point(corr: Correspondence, pose: RelativePose) -> Triangulation:
    """Midpoint-triangulate one correspondence."""
    points, depth1, depth2, reliable = triangulate_points(
        np.asarray(corr.x, dtype=np.float64),
        np.asarray(corr.x_prime, dtype=np.float64),
        pose,
    )
    return Triangulation(
        point=points[0],
        depth1=float(depth1[0]),
        depth2=float(depth2[0]),
        reliable=bool(reliable[0]),
    )


def pose_candidates(e: EssentialMatrix) -> list[RelativePose]:
    """Return the four (R, t) factorizations of an essential matrix."""
    u, _, vt = np.linalg.svd(e.e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    r1 = u @ _W @ vt
    r2 = u @ _W.T @ vt
    t = u[:, 2] / np.linalg.norm(u[:, 2])
    return [
        RelativePose(r1, t),
        RelativePose(r1, -t),
        RelativePose(r2, t),
        RelativePose(r2, -t),
    ]


def cheirality_scores(
    e: EssentialMatrix, x: np.ndarray, x_prime: np.ndarray, weights: np.ndarray
) -> tuple[list[RelativePose], np.ndarray]:
    """Return the four candidates and their weighted positive-depth counts."""
    candidates = pose_candidates(e)
    scores = np.zeros(len(candidates))
    for index, pose in enumerate(candidates):
        _, depth1, depth2, reliable = triangulate_points(x, x_prime, pose)
        in_front = reliable & (np.nan_to_num(depth1) > 0) & (np.nan_to_num(depth2) > 0)
        scores[index] = weights[in_front].sum()
    return candidates, scores


def decompose_essential(
    e: EssentialMatrix, corrs: Correspondences, weights: np.ndarray | Iterable[float]
) -> RelativePose:
    """Recover the pose whose cheirality vote is largest."""
    x, x_prime = coordinates(corrs)
    weights = _validate_weights(weights, len(x))
    candidates, scores = cheirality_scores(e, x, x_prime, weights)
    if not (scores > 0).any():
        raise CheiralityException(
            "No pose candidate has points in front of both cameras"
        )
    best = int(np.argmax(scores))
    _LOGGER.debug("Cheirality scores %s, picked candidate %d", scores, best)
    return candidates[best]


def symmetric_epipolar_distances(
    x: np.ndarray, x_prime: np.ndarray, e: np.ndarray
) -> np.ndarray:
    """Vectorized symmetric epipolar distance of N correspondences."""
    hx = homogeneous(x)
    hxp = homogeneous(x_prime)
    lines1 = hx @ e.T
    lines2 = hxp @ e
    numerator = np.einsum("ij,ij->i", hxp, lines1) ** 2
    den1 = lines1[:, 0] ** 2 + lines1[:, 1] ** 2
    den2 = lines2[:, 0] ** 2 + lines2[:, 1] ** 2

    with np.errstate(divide="ignore", invalid="ignore"):
        term1 = np.where(
            den1 > 0, numerator / den1, np.where(numerator > 0, np.inf, 0.0)
        )
        term2 = np.where(
            den2 > 0, numerator / den2, np.where(numerator > 0, np.inf, 0.0)
        )
    return np.where((den1 == 0) & (den2 == 0), np.inf, term1 + term2)


def symmetric_epipolar_distance(
    corr: Correspondence, e: EssentialMatrix | np.ndarray
) -> float:
    """Return (x'^T E x)^2 (1/|(Ex)_12|^2 + 1/|(E^T x')_12|^2)."""
    matrix = e.e if isinstance(e, EssentialMatrix) else np.asarray(e, dtype=float)
    check_finite(matrix, "essential matrix entry")
    return float(
        symmetric_epipolar_distances(
            np.asarray(corr.x, dtype=np.float64),
            np.asarray(corr.x_prime, dtype=np.float64),
            matrix,
        )[0]
    )


def rotation_error_deg(estimated: np.ndarray, reference: np.ndarray) -> float:
    """Return the geodesic angle between two rotations in degrees."""
    return float(np.degrees(Rotation.from_matrix(reference.T @ estimated).magnitude()))


def translation_error_deg(estimated: np.ndarray, reference: np.ndarray) -> float:
    """Return the sign-invariant angle between two translation directions."""
    a = estimated / np.linalg.norm(estimated)
    b = reference / np.linalg.norm(reference)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), abs(a @ b))))


def pose_angular_errors(est: RelativePose, gt: RelativePose) -> tuple[float, float]:
    """Return (rotation error, translation error) in degrees."""
    return (
        rotation_error_deg(est.rotation, gt.rotation),
        translation_error_deg(est.translation, gt.translation),
    )


def hartley_transform(points: np.ndarray) -> np.ndarray:
    """Return the similarity moving the centroid to 0 and the mean radius to sqrt 2."""
    centroid = points.mean(axis=0)
    mean_distance = np.linalg.norm(points - centroid, axis=1).mean()
    if mean_distance <= 0 or not np.isfinite(mean_distance):
        raise DegenerateConfigurationException("Points coincide")
    scale = np.sqrt(2) / mean_distance
    return np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )


def apply_homography(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Warp N x 2 points; points sent to infinity come back as inf."""
    warped = homogeneous(points) @ np.asarray(h).T
    w = warped[:, 2:]
    at_infinity = np.abs(w[:, 0]) < HOMOGENEOUS_W_TOLERANCE
    with np.errstate(divide="ignore", invalid="ignore"):
        result = warped[:, :2] / w
    result[at_infinity] = np.inf
    return result


def _triangle_areas(points: np.ndarray, triples: np.ndarray) -> np.ndarray:
    a = points[triples[:, 0]]
    b = points[triples[:, 1]]
    c = points[triples[:, 2]]
    ab = b - a
    ac = c - a
    return 0.5 * np.abs(ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])


def is_collinear_configuration(points: np.ndarray) -> bool:
    """Report point sets without four points in general position.

    Such a set lies on a line, or on a line plus one point. Up to eight points
    every four-point subset is checked for a collinear triple, so a minimal
    sample fails on any such triple. Larger sets are checked through the mean
    squared distance to the best-fit line, with and without each point. Both
    are measured on Hartley-normalized coordinates.
    """
    count = len(points)
    if count < HOMOGRAPHY_SAMPLE_SIZE:
        return True
    lifted = homogeneous(points) @ hartley_transform(points).T
    normalized = lifted[:, :2]
    if count <= _EXHAUSTIVE_COLLINEAR_LIMIT:
        quads = np.array(list(combinations(range(count), HOMOGRAPHY_SAMPLE_SIZE)))
        triples = quads[:, _QUAD_TRIPLES].reshape(-1, 3)
        areas = _triangle_areas(normalized, triples).reshape(len(quads), -1)
        return bool((areas < COLLINEAR_AREA_TOLERANCE).any(axis=1).all())

    centered = normalized - normalized.mean(axis=0)
    scatter = centered.T @ centered
    outer = centered[:, :, None] * centered[:, None, :]
    # Scatter of the set with point i removed
    reduced = scatter - count / (count - 1) * outer
    spread = np.append(
        np.linalg.eigvalsh(reduced)[:, 0] / (count - 1),
        np.linalg.eigvalsh(scatter)[0] / count,
    )
    return bool((spread < COLLINEAR_AREA_TOLERANCE).any())


def normalize_homography(h: np.ndarray) -> np.ndarray:
    """Scale a homography so its largest-magnitude entry is +1."""
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    pivot = h.flat[int(np.argmax(np.abs(h)))]
    if pivot == 0 or not np.isfinite(pivot):
        raise DegenerateConfigurationException("Homography has no direction")
    return h / pivot


def dlt_homography(corrs: Correspondences) -> Homography:
    """Estimate x' ~ H x with the normalized Direct Linear Transform."""
    x, x_prime = coordinates(corrs)
    return estimate_homography(x, x_prime)


def estimate_homography(x: np.ndarray, x_prime: np.ndarray) -> Homography:
    """Normalized DLT on validated coordinate arrays."""
    if len(x) < HOMOGRAPHY_SAMPLE_SIZE:
        raise DegenerateConfigurationException(
            f"Need {HOMOGRAPHY_SAMPLE_SIZE} correspondences, got {len(x)}"
        )
    if is_collinear_configuration(x):
        raise DegenerateConfigurationException("Collinear source points")

    t_src = hartley_transform(x)
    t_dst = hartley_transform(x_prime)
    src = homogeneous(x) @ t_src.T
    dst = homogeneous(x_prime) @ t_dst.T

    zeros = np.zeros((len(src), 3))
    upper = np.hstack([-src, zeros, dst[:, :1] * src])
    lower = np.hstack([zeros, -src, dst[:, 1:2] * src])
    system = np.empty((2 * len(src), 9))
    system[0::2] = upper
    system[1::2] = lower

    _, singular, vt = np.linalg.svd(system, full_matrices=True)
    if singular[7] <= EIGEN_GAP_TOLERANCE * singular[0]:
        raise DegenerateConfigurationException("DLT system is rank deficient")

    h = np.linalg.solve(t_dst, vt[-1].reshape(3, 3) @ t_src)
    if abs(np.linalg.det(normalize_homography(h))) < EIGEN_GAP_TOLERANCE:
        raise DegenerateConfigurationException("Estimated homography is singular")
    return Homography(normalize_homography(h))


def transfer_errors(h: np.ndarray, x: np.ndarray, x_prime: np.ndarray) -> np.ndarray:
    """Return the forward transfer error |x' - H x| of every correspondence."""
    return np.linalg.norm(apply_homography(h, x) - x_prime, axis=1)


def homography_corner_error(
    est: Homography, gt: Homography, width: float, height: float
) -> float:
    """Mean distance between the image corners warped by est and by gt."""
    corners = np.array([[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]])
    warped_est = apply_homography(est.h, corners)
    warped_gt = apply_homography(gt.h, corners)
    if not (np.isfinite(warped_est).all() and np.isfinite(warped_gt).all()):
        return float("inf")
    return float(np.linalg.norm(warped_est - warped_gt, axis=1).mean())


def homography_to_pixels(h: Homography, intrinsics: CameraIntrinsics) -> Homography:
    """Express a normalized-coordinate homography in a pixel frame."""
    k = intrinsics.matrix
    return Homography(normalize_homography(k @ h.h @ np.linalg.inv(k)))
