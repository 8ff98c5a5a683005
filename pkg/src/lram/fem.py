"""2D P1 triangular finite elements on the unit square.

Structured mesh generation, assembly of the mean-coefficient stiffness matrix,
per-sample perturbation stiffness matrices, the mass matrix and the load
vector, homogeneous Dirichlet boundary handling, and seeded random diffusion
fields.  The diffusion coefficient is ``1 + epsilon * sigma`` with ``sigma``
drawn independently per element, so element integrals are exact and each
perturbation matrix is linear in the draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import numerics
from .errors import (
    ConfigRangeError,
    DegenerateElementError,
    DimensionMismatchError,
    InvalidMeshSizeError,
)

DISTRIBUTIONS = ("normal", "uniform")


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Conforming triangulation of the unit square.

    Elements are node-index triples in counter-clockwise order; boundary nodes
    are exactly the nodes with a coordinate on {0, 1}.
    """

    nodes: np.ndarray           # (n_nodes, 2)
    elements: np.ndarray        # (n_elements, 3), int
    boundary_nodes: np.ndarray  # sorted int indices
    h: float

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def num_elements(self) -> int:
        return self.elements.shape[0]


def structured_mesh(h: float) -> TriMesh:
    """Uniform mesh with ``round(1/h)`` cells per side, two triangles per cell.

    Node ordering is row-major and deterministic; every triangle has signed
    area ``h_eff^2 / 2`` with ``h_eff = 1 / round(1/h)``.
    """
    if not 0.0 < h < 1.0:
        raise InvalidMeshSizeError(f"mesh size must lie in (0, 1), got {h}")
    n = int(round(1.0 / h))
    if n < 1:
        raise InvalidMeshSizeError(f"mesh size {h} yields no cells")
    side = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(side, side, indexing="xy")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    elements = []
    for j in range(n):
        for i in range(n):
            v00 = j * (n + 1) + i
            v10 = v00 + 1
            v01 = v00 + (n + 1)
            v11 = v01 + 1
            elements.append((v00, v10, v11))
            elements.append((v00, v11, v01))
    elements = np.asarray(elements, dtype=np.int64)

    on_edge = (
        np.isclose(nodes[:, 0], 0.0)
        | np.isclose(nodes[:, 0], 1.0)
        | np.isclose(nodes[:, 1], 0.0)
        | np.isclose(nodes[:, 1], 1.0)
    )
    boundary = np.flatnonzero(on_edge)
    return TriMesh(nodes=nodes, elements=elements, boundary_nodes=boundary, h=1.0 / n)


def signed_areas(mesh: TriMesh) -> np.ndarray:
    pts = mesh.nodes[mesh.elements]
    d1 = pts[:, 1] - pts[:, 0]
    d2 = pts[:, 2] - pts[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1])


@dataclass(frozen=True, eq=False)
class RandomField:
    """Piecewise-constant diffusion perturbation for one Monte-Carlo sample.

    ``values`` holds the raw per-element draws; the assembled coefficient is
    ``epsilon * values``.  The draw is reproducible from
    ``(master_seed, sample_index)`` alone.
    """

    epsilon: float
    distribution: str
    values: np.ndarray
    master_seed: int
    sample_index: int


def sample_fields(mesh: TriMesh, num_samples: int, epsilon: float,
                  distribution: str, master_seed: int) -> list[RandomField]:
    """Draw ``num_samples`` independent per-element fields.

    Sample ``m`` is generated from a dedicated stream keyed by
    ``(master_seed, m)``, so it is bitwise reproducible regardless of how many
    samples are requested or in which order they are consumed.
    """
    if num_samples < 1:
        raise ConfigRangeError(f"num_samples must be >= 1, got {num_samples}")
    if epsilon < 0.0:
        raise ConfigRangeError(f"epsilon must be >= 0, got {epsilon}")
    if distribution not in DISTRIBUTIONS:
        raise ConfigRangeError(
            f"distribution must be one of {DISTRIBUTIONS}, got {distribution!r}"
        )
    fields = []
    for m in range(num_samples):
        rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(m,)))
        if distribution == "normal":
            values = rng.standard_normal(mesh.num_elements)
        else:
            values = rng.uniform(-1.0, 1.0, mesh.num_elements)
        fields.append(RandomField(epsilon=float(epsilon), distribution=distribution,
                                  values=values, master_seed=master_seed, sample_index=m))
    return fields


def triangle_stiffness(coords) -> np.ndarray:
    """P1 stiffness matrix of one triangle with unit coefficient."""
    coords = np.asarray(coords, dtype=float)
    x, y = coords[:, 0], coords[:, 1]
    b = np.array([y[1] - y[2], y[2] - y[0], y[0] - y[1]])
    c = np.array([x[2] - x[1], x[0] - x[2], x[1] - x[0]])
    area = 0.5 * ((x[1] - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (y[1] - y[0]))
    if area <= 0.0:
        raise DegenerateElementError(f"triangle area {area} is not positive")
    return (np.outer(b, b) + np.outer(c, c)) / (4.0 * area)


def triangle_mass(coords) -> np.ndarray:
    """Exact P1 mass matrix of one triangle: area/12 * [[2,1,1],[1,2,1],[1,1,2]]."""
    coords = np.asarray(coords, dtype=float)
    x, y = coords[:, 0], coords[:, 1]
    area = 0.5 * ((x[1] - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (y[1] - y[0]))
    if area <= 0.0:
        raise DegenerateElementError(f"triangle area {area} is not positive")
    return area / 12.0 * np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]])


@dataclass(frozen=True, eq=False)
class AssembledSystem:
    """Assembled matrices and load for one mesh and one batch of field samples.

    ``base`` is the mean-coefficient stiffness with Dirichlet rows/columns
    eliminated to the identity; each entry of ``perturbations`` has its
    boundary rows and columns zeroed (hence is rank-deficient); ``mass`` is the
    full mass matrix without boundary treatment; ``load`` is mass times the
    nodal source with boundary entries zeroed.
    """

    base: sp.csr_array
    perturbations: list
    mass: sp.csr_array
    load: np.ndarray
    boundary_nodes: np.ndarray
    node_coords: np.ndarray
    min_coefficient: np.ndarray  # per sample: min over elements of 1 + eps*sigma


def _element_geometry(mesh: TriMesh):
    pts = mesh.nodes[mesh.elements]  # (T, 3, 2)
    x, y = pts[:, :, 0], pts[:, :, 1]
    areas = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
                   - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    if np.any(areas <= 1e-300):
        raise DegenerateElementError("mesh contains a triangle with nonpositive area")
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    k_geo = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) \
        / (4.0 * areas)[:, None, None]
    m_ref = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    m_loc = areas[:, None, None] * m_ref[None, :, :]
    return areas, k_geo, m_loc


def _triplets(mesh: TriMesh):
    tri = mesh.elements
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return rows, cols


def assemble(mesh: TriMesh, field_samples, source, apply_bc: bool = True) -> AssembledSystem:
    """Assemble the base stiffness, perturbation stiffness matrices, mass, and load.

    ``source`` is a callable ``f(x, y)`` evaluated at the nodes; the load is
    the mass matrix applied to the nodal source values.  With ``apply_bc``
    (the default) homogeneous Dirichlet conditions are imposed by symmetric
    elimination, which preserves positive definiteness of ``base``.
    """
    n = mesh.num_nodes
    areas, k_geo, m_loc = _element_geometry(mesh)
    rows, cols = _triplets(mesh)

    is_boundary = np.zeros(n, dtype=bool)
    is_boundary[mesh.boundary_nodes] = True
    if apply_bc:
        keep = ~(is_boundary[rows] | is_boundary[cols])
    else:
        keep = np.ones(rows.shape[0], dtype=bool)

    def stiffness_from(coeff):
        data = (k_geo * coeff[:, None, None]).ravel()
        r, c, d = rows[keep], cols[keep], data[keep]
        if apply_bc:
            r = np.concatenate([r, mesh.boundary_nodes])
            c = np.concatenate([c, mesh.boundary_nodes])
            d = np.concatenate([d, np.ones(mesh.boundary_nodes.shape[0])])
        out = sp.csr_array((d, (r, c)), shape=(n, n))
        out.sum_duplicates()
        return out

    def perturbation_from(coeff):
        data = (k_geo * coeff[:, None, None]).ravel()
        out = sp.csr_array((data[keep], (rows[keep], cols[keep])), shape=(n, n))
        out.sum_duplicates()
        return out

    base = stiffness_from(np.ones(mesh.num_elements))
    perturbations = []
    min_coeff = []
    for field in field_samples:
        if field.values.shape[0] != mesh.num_elements:
            raise DimensionMismatchError(
                "field has a value per element mismatch with the mesh"
            )
        coeff = field.epsilon * field.values
        perturbations.append(perturbation_from(coeff))
        min_coeff.append(float(np.min(1.0 + coeff)))

    mass_data = m_loc.ravel()
    mass = sp.csr_array((mass_data, (rows, cols)), shape=(n, n))
    mass.sum_duplicates()

    nodal_source = np.array([float(source(px, py)) for px, py in mesh.nodes])
    load = mass @ nodal_source
    if apply_bc:
        load = load.copy()
        load[mesh.boundary_nodes] = 0.0

    return AssembledSystem(
        base=base,
        perturbations=perturbations,
        mass=mass,
        load=load,
        boundary_nodes=mesh.boundary_nodes,
        node_coords=mesh.nodes,
        min_coefficient=np.asarray(min_coeff),
    )


def mass_norm(mass, vec) -> float:
    """Discrete L2 norm sqrt(v' * M * v) of nodal values."""
    vec = np.asarray(vec, dtype=float)
    return float(np.sqrt(max(vec @ (mass @ vec), 0.0)))


def manufactured_check(h_list) -> list[tuple[float, float]]:
    """L2 errors of the deterministic solve against sin(pi x) sin(pi y).

    Uses unit coefficient and source ``2 pi^2 sin(pi x) sin(pi y)``, for which
    the exact solution vanishes on the boundary.  Returns (h, error) pairs for
    convergence-rate checks.
    """
    out = []
    for h in h_list:
        mesh = structured_mesh(h)
        system = assemble(
            mesh, [], lambda x, y: 2.0 * np.pi ** 2 * np.sin(np.pi * x) * np.sin(np.pi * y)
        )
        fact = numerics.factorize_spd(system.base)
        solution = fact.solve(system.load)
        exact = np.sin(np.pi * mesh.nodes[:, 0]) * np.sin(np.pi * mesh.nodes[:, 1])
        out.append((mesh.h, mass_norm(system.mass, solution - exact)))
    return out


def mesh_to_csv(mesh: TriMesh, nodes_path, elements_path) -> None:
    with open(nodes_path, "w", newline="\n") as fh:
        fh.write("node,x,y,boundary\n")
        boundary = set(int(i) for i in mesh.boundary_nodes)
        for i, (x, y) in enumerate(mesh.nodes):
            flag = 1 if i in boundary else 0
            fh.write(f"{i},{float(x)!r},{float(y)!r},{flag}\n")
    with open(elements_path, "w", newline="\n") as fh:
        fh.write("element,v0,v1,v2\n")
        for e, (a, b, c) in enumerate(mesh.elements):
            fh.write(f"{e},{a},{b},{c}\n")


def field_to_csv(field: RandomField, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("element,value\n")
        for e, v in enumerate(field.values):
            fh.write(f"{e},{float(v)!r}\n")
