"""Vessel enhancement, masking, and centerline graph extraction.

2D en-face enhancement uses the ratio-free Hessian response of Jerman with
tau = 0.5 over a small scale set; 3D masking uses an oriented-flux measure
(gradient flux of the smoothed volume through a sphere, evaluated in the
Fourier domain). Thresholds come from Otsu's criterion on the log response.
The binary 2D mask is thinned to a skeleton and decomposed into a node/link
graph that names the vessel segments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize

from .volume import round_half_up

JERMAN_TAU = 0.5
DEFAULT_SCALE_FACTORS = (1.0, 1.5, 2.0)   # x A-scan spacing


def _hessian_2d(img: np.ndarray, sigma_px: float) -> tuple[np.ndarray, ...]:
    hyy = ndimage.gaussian_filter(img, sigma_px, order=(2, 0))
    hxy = ndimage.gaussian_filter(img, sigma_px, order=(1, 1))
    hxx = ndimage.gaussian_filter(img, sigma_px, order=(0, 2))
    return hyy, hxy, hxx


def vesselness_2d(enface: np.ndarray, spacing_um: float,
                  scale_factors=DEFAULT_SCALE_FACTORS,
                  tau: float = JERMAN_TAU) -> np.ndarray:
    """Bright-ridge response in [0, 1]; maximum over scales."""
    img = enface.astype(np.float64)
    # the response depends only on eigenvalue ratios, so the ~1e-4 DC leak of
    # the derivative kernels would saturate it on a flat image; center to
    # knock the leak down to round-off, then floor it against the original
    # intensity scale
    floor = 1e-8 * max(float(np.abs(img).max()), np.finfo(np.float64).tiny)
    img = img - img.mean()
    out = np.zeros_like(img)
    for factor in scale_factors:
        sigma_px = factor  # scale set is specified as multiples of the spacing
        hyy, hxy, hxx = _hessian_2d(img, sigma_px)
        gamma = sigma_px ** 2
        hyy, hxy, hxx = gamma * hyy, gamma * hxy, gamma * hxx
        mean = 0.5 * (hyy + hxx)
        disc = np.sqrt(0.25 * (hyy - hxx) ** 2 + hxy**2)
        e1, e2 = mean + disc, mean - disc
        swap = np.abs(e1) > np.abs(e2)
        lam2 = np.where(swap, e1, e2)   # larger magnitude
        lam1 = np.where(swap, e2, e1)
        x = -lam2  # positive on bright ridges
        top = x.max()
        if top <= floor:
            continue
        lam_rho = np.where(x > tau * top, x, tau * top)
        lam_rho = np.where(x <= 0, 0.0, lam_rho)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            resp = x**2 * (lam_rho - x) * (3.0 / (x + lam_rho)) ** 3
            ratio = np.abs(lam1) / np.maximum(np.abs(lam2), floor)
        resp = np.where((x <= 0) | (lam_rho <= 0), 0.0, resp)
        resp = np.where(x >= 0.5 * lam_rho, np.where(x > 0, 1.0, 0.0), resp)
        # ridges have one curvature near zero, spots have two alike
        resp *= np.exp(-2.0 * ratio**2)
        np.maximum(out, resp, out=out)
    return np.clip(out, 0.0, 1.0)


def otsu_log_threshold(response: np.ndarray, n_bins: int = 256
                       ) -> tuple[np.ndarray, float]:
    """Threshold the response by Otsu's criterion in log space.

    Only positive responses enter the histogram (zero response has no log
    and can never be foreground). Returns (mask, linear-domain threshold).
    """
    finite = response[np.isfinite(response)]
    vals = finite[finite > 0]
    top = float(vals.max()) if vals.size else 0.0
    if top <= 0:
        return np.zeros_like(response, bool), 0.0
    eps = 1e-6 * top
    logv = np.log(vals + eps)
    hist, edges = np.histogram(logv, bins=n_bins)
    w0 = np.cumsum(hist)
    total = w0[-1]
    w1 = total - w0
    centers = 0.5 * (edges[:-1] + edges[1:])
    mass = np.cumsum(hist * centers)
    mu0 = np.where(w0 > 0, mass / np.maximum(w0, 1), 0.0)
    mu1 = np.where(w1 > 0, (mass[-1] - mass) / np.maximum(w1, 1), 0.0)
    var_b = w0.astype(np.float64) * w1 * (mu0 - mu1) ** 2
    k = int(np.argmax(var_b[:-1]))
    t_log = edges[k + 1]
    t_lin = float(np.exp(t_log) - eps)
    return response > t_lin, t_lin


def oof_response(vol: np.ndarray, radius_um: float, spacing_um,
                 sigma_um: float | None = None
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Curvilinear measure from oriented gradient flux through a sphere.

    For each voxel, eigenvalues of the area-normalized flux matrix of the
    Gaussian-smoothed volume gradient through a sphere of the given radius;
    tubes give two strongly negative eigenvalues across the axis. Returns
    (l1, l2, l3, m) with |l1| >= |l2| >= |l3| and m = sqrt(|l1 * l2|) where
    both leading eigenvalues are negative, else 0.
    """
    spacing = np.asarray(spacing_um, dtype=np.float64)
    if spacing.shape != (3,):
        raise ValueError("spacing_um must give one value per axis")
    if radius_um <= 0:
        raise ValueError("radius_um must be positive")
    if 2.0 * radius_um > float((spacing * vol.shape).min()):
        raise ValueError("flux sphere larger than the volume extent")
    if sigma_um is None:
        sigma_um = float(spacing.min())
    ny, nx, nz = vol.shape
    freqs = [np.fft.fftfreq(n, d=d) for n, d in zip((ny, nx, nz), spacing)]
    u = np.meshgrid(*freqs, indexing="ij", sparse=True)
    u2 = sum(ui**2 for ui in u)
    umag = np.sqrt(u2)
    x = 2.0 * np.pi * radius_um * umag
    with np.errstate(divide="ignore", invalid="ignore"):
        band = np.cos(x) - np.sin(x) / x
        band = np.where(x > 0, band, 0.0)
        proj_den = np.where(u2 > 0, u2, 1.0)
    lowpass = np.exp(-2.0 * np.pi**2 * sigma_um**2 * u2)
    base = (band / radius_um) * lowpass / proj_den
    f_vol = np.fft.fftn(vol.astype(np.float64))

    q = np.empty((ny, nx, nz, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            kern = base * u[i] * u[j]
            comp = np.fft.ifftn(f_vol * kern).real
            q[..., i, j] = comp
            if i != j:
                q[..., j, i] = comp
    eig = np.linalg.eigvalsh(q)                       # ascending
    order = np.argsort(-np.abs(eig), axis=-1, kind="stable")
    eig = np.take_along_axis(eig, order, axis=-1)
    l1, l2, l3 = eig[..., 0], eig[..., 1], eig[..., 2]
    both_neg = (l1 <= 0) & (l2 <= 0) & ((l1 < 0) | (l2 < 0))
    m = np.where(both_neg, np.sqrt(np.abs(l1 * l2)), 0.0)
    return l1, l2, l3, m


def mask_3d(vol: np.ndarray, radius_um: float, spacing_um,
            sigma_um: float | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """OOF response -> Otsu-on-log mask. Returns (mask, response, threshold)."""
    *_, resp = oof_response(vol, radius_um, spacing_um, sigma_um)
    mask, thr = otsu_log_threshold(resp)
    return mask, resp, thr


@dataclass
class GraphNode:
    node_id: int
    pixels: np.ndarray            # (k, 2) int (y, x)


@dataclass
class GraphLink:
    segment_id: int
    node_ids: tuple[int, int]
    pixels: np.ndarray            # ordered (y, x) path including end nodes
    interior: np.ndarray          # pixels strictly between the end nodes


@dataclass
class VesselGraph:
    nodes: list = field(default_factory=list)
    links: list = field(default_factory=list)
    shape: tuple = (0, 0)

    def skeleton_pixel_count(self) -> int:
        node_px = sum(len(n.pixels) for n in self.nodes)
        link_px = sum(len(li.interior) for li in self.links)
        return node_px + link_px

    def to_json(self) -> str:
        doc = {
            "shape": list(self.shape),
            "nodes": [{"id": n.node_id, "pixels": n.pixels.tolist()}
                      for n in self.nodes],
            "links": [{"id": li.segment_id, "nodes": list(li.node_ids),
                       "pixels": li.pixels.tolist()} for li in self.links],
        }
        return json.dumps(doc, sort_keys=True)


_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _neighbors(p, skel_set):
    y, x = p
    return [(y + dy, x + dx) for dy, dx in _OFFSETS if (y + dy, x + dx) in skel_set]


def skeletonize_graph(mask: np.ndarray) -> tuple[VesselGraph, np.ndarray]:
    """Thin the mask, split the skeleton into nodes and links, and name every
    mask pixel by its nearest link.

    Nodes are connected groups of skeleton pixels with != 2 neighbors; links
    are the maximal paths between them (a closed loop with no natural node
    gets one designated on its lexicographically first pixel). Node pixels and
    link interiors partition the skeleton. Returns (graph, id image) with ids
    1..K and 0 = background.
    """
    skel = skeletonize(mask.astype(bool))
    graph = VesselGraph(shape=tuple(mask.shape))
    id_img = np.zeros(mask.shape, dtype=np.uint32)
    ys, xs = np.nonzero(skel)
    if ys.size == 0:
        return graph, id_img
    skel_set = set(zip(ys.tolist(), xs.tolist()))
    degree = {p: len(_neighbors(p, skel_set)) for p in skel_set}

    node_px = sorted(p for p, d in degree.items() if d != 2)
    node_mask = np.zeros(mask.shape, bool)
    for p in node_px:
        node_mask[p] = True
    labels, n_nodes = ndimage.label(node_mask, structure=np.ones((3, 3), int))
    node_of = {}
    for p in node_px:
        node_of[p] = int(labels[p])
    # loops with no natural node: designate the first pixel of each cycle
    leftover = sorted(p for p in skel_set if p not in node_of)
    visited_interior = set()
    for p in leftover:
        if p in node_of or p in visited_interior:
            continue
        comp = {p}
        stack = [p]
        while stack:
            q = stack.pop()
            for nb in _neighbors(q, skel_set):
                if nb not in comp and nb not in node_of:
                    comp.add(nb)
                    stack.append(nb)
        if any(nb in node_of for q in comp for nb in _neighbors(q, skel_set)):
            continue  # path pixels attached to real nodes; traced below
        n_nodes += 1
        node_of[min(comp)] = n_nodes

    nodes_pixels = {}
    for p, nid in node_of.items():
        nodes_pixels.setdefault(nid, []).append(p)
    for nid in sorted(nodes_pixels):
        graph.nodes.append(GraphNode(nid, np.array(sorted(nodes_pixels[nid]))))

    links = []
    seen = set()           # consumed interior pixels
    crossed = set()        # (node pixel, first step) pairs already walked
    for start in sorted(node_of):
        for nb in sorted(_neighbors(start, skel_set)):
            if nb in node_of:
                # adjacent nodes of different groups: zero-interior link
                if node_of[nb] != node_of[start] and (nb, start) not in crossed:
                    crossed.add((start, nb))
                    links.append(([start, nb], node_of[start], node_of[nb]))
                continue
            if nb in seen or (start, nb) in crossed:
                continue
            path = [start, nb]
            prev, cur = start, nb
            while cur not in node_of:
                seen.add(cur)
                nxt = [q for q in _neighbors(cur, skel_set) if q != prev]
                if not nxt:
                    break  # open end that thinning left at degree 1 (is a node)
                # prefer unvisited continuation; closed loops return to start
                follow = [q for q in nxt if q not in path[:-1] or q == start]
                cur, prev = (follow[0] if follow else nxt[0]), cur
                path.append(cur)
            crossed.add((start, nb))
            if cur in node_of:
                crossed.add((cur, path[-2]))
                links.append((path, node_of[start], node_of[cur]))
            else:
                links.append((path, node_of[start], node_of[start]))

    for seg_id, (path, na, nb) in enumerate(sorted(
            links, key=lambda t: [list(p) for p in t[0]]), start=1):
        arr = np.array(path)
        interior = np.array([p for p in path if p not in node_of]).reshape(-1, 2)
        graph.links.append(GraphLink(seg_id, (na, nb), arr, interior))

    claim_px, claim_id = [], []
    for li in graph.links:
        source = li.interior if len(li.interior) else li.pixels
        for p in source:
            claim_px.append(p)
            claim_id.append(li.segment_id)
    if claim_px:
        tree = cKDTree(np.asarray(claim_px, dtype=np.float64))
        pts = np.argwhere(mask)
        k = min(8, len(claim_px))
        dist, idx = tree.query(pts, k=k)
        dist = np.atleast_2d(dist.T).T
        idx = np.atleast_2d(idx.T).T
        ids = np.asarray(claim_id, dtype=np.uint32)[idx]
        near = dist <= dist[:, :1] + 1e-9
        ids = np.where(near, ids, np.iinfo(np.uint32).max)
        id_img[pts[:, 0], pts[:, 1]] = ids.min(axis=1)
    return graph, id_img


def project_ids(id_img: np.ndarray, vessel_mask: np.ndarray,
                slab: np.ndarray) -> np.ndarray:
    """(Y, X, Z) u32 ids: vessel voxels inside the slab take their column id."""
    keep = vessel_mask & slab
    return np.where(keep, id_img[:, :, None].astype(np.uint32), np.uint32(0))
