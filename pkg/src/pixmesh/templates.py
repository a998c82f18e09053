"""Procedural templates: the capsule-man humanoid and a small capped tube.

Bodies are assembled from tubes (rings of vertices along an axis, optionally
closed by a pole). Each tube is split into groups of consecutive stations and
every group owns a UV chart:

* ``halves``: two parts, front (angle in [0, pi]) and back; ``u`` runs with the
  angle, ``v`` along the axis. Ring sizes are even so the seams fall on vertices.
* ``annulus``: one part mapped onto a ring ``0.5 + R(s) (cos a, sin a)`` whose
  radius shrinks along the tube. Seamless, and a terminal pole maps to the
  centre.

Limbs hang off the trunk by bridging their first ring to the nearest trunk
vertices, which keeps the mesh graph connected.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import JointRegressor, TemplateMesh

TWO_PI = 2.0 * np.pi


@dataclass
class Bone:
    name: str
    pivot: np.ndarray
    max_angle_deg: float
    weights: np.ndarray  # per-vertex fraction of the bone angle
    axis: tuple[float, float, float] | str | None = None  # None: random unit axis; "horizontal": random in xz


@dataclass
class Rig:
    """Bones in application order (deepest first, global last)."""

    bones: list[Bone] = field(default_factory=list)
    limb_vertex_groups: dict[str, np.ndarray] = field(default_factory=dict)
    rigid_edges: np.ndarray | None = None


@dataclass
class _Group:
    kind: str  # "halves" | "annulus"
    parts: tuple[int, ...]
    r_start: float = 0.45
    r_end: float = 0.15


class _Builder:
    def __init__(self):
        self.verts: list[np.ndarray] = []
        self.vpart: list[int] = []
        self.vuv: list[tuple[float, float]] = []
        self.faces: list[tuple[int, int, int]] = []
        self.fpart: list[int] = []
        self.fuv: list[tuple] = []
        self.face_center: list[np.ndarray] = []

    def add_vertex(self, p, part, uv) -> int:
        self.verts.append(np.asarray(p, dtype=np.float64))
        self.vpart.append(int(part))
        self.vuv.append((float(uv[0]), float(uv[1])))
        return len(self.verts) - 1

    def add_face(self, idx, part, uvs, center):
        a, b, c = idx
        pa, pb, pc = self.verts[a], self.verts[b], self.verts[c]
        n = np.cross(pb - pa, pc - pa)
        outward = (pa + pb + pc) / 3.0 - center
        if np.dot(n, outward) < 0:
            idx = (a, c, b)
            uvs = (uvs[0], uvs[2], uvs[1])
        self.faces.append(tuple(int(i) for i in idx))
        self.fpart.append(int(part))
        self.fuv.append(tuple(tuple(float(x) for x in uv) for uv in uvs))
        self.face_center.append(center)


def _chart(group: _Group, s: float, theta: float, pole: bool = False) -> tuple[int, tuple[float, float]]:
    """Part and UV of a point at axial parameter ``s`` and angle ``theta`` (unwrapped)."""
    if group.kind == "halves":
        front = theta <= np.pi + 1e-12
        if pole:
            return group.parts[0], (0.5, s)
        t0 = 0.0 if front else np.pi
        u = min(max((theta - t0) / np.pi, 0.0), 1.0)
        return group.parts[0 if front else 1], (u, s)
    R = group.r_start + (group.r_end - group.r_start) * s
    if pole:
        R = max(R, 0.0)
    return group.parts[0], (0.5 + R * np.cos(theta), 0.5 + R * np.sin(theta))


def _face_chart(group: _Group, s: float, theta: float, theta_mid: float):
    """Like :func:`_chart` but the half is chosen by the face's mid angle."""
    if group.kind == "halves":
        t0 = 0.0 if theta_mid < np.pi else np.pi
        part = group.parts[0] if theta_mid < np.pi else group.parts[1]
        return part, (min(max((theta - t0) / np.pi, 0.0), 1.0), s)
    R = max(group.r_start + (group.r_end - group.r_start) * s, 0.0)
    return group.parts[0], (0.5 + R * np.cos(theta), 0.5 + R * np.sin(theta))


def _frame(axis):
    d = np.asarray(axis, dtype=np.float64)
    d = d / np.linalg.norm(d)
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(ref, d)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return d, e1, e2


@dataclass
class _Tube:
    ring_ids: list[np.ndarray]
    pole_start: int | None
    pole_end: int | None
    centers: list[np.ndarray]


def build_tube(b: _Builder, stations, groups: list[_Group], n: int, axis, frame=None) -> _Tube:
    """Add a tube to ``b``.

    ``stations`` is a list of ``(kind, center, (r1, r2), group_index)`` where kind
    is ``"ring"`` or ``"pole"``; poles may only be first or last.
    """
    if n % 2:
        raise ValueError("ring size must be even")
    d, e1, e2 = frame if frame is not None else _frame(axis)
    thetas = TWO_PI * np.arange(n) / n
    # axial parameter of each station within its group's chart
    gidx = [st[3] for st in stations]
    s_of: list[dict[int, float]] = [dict() for _ in stations]
    for g in sorted(set(gidx)):
        members = [k for k, gi in enumerate(gidx) if gi == g]
        ext = members + ([members[-1] + 1] if members[-1] + 1 < len(stations) else [])
        for pos, k in enumerate(ext):
            s_of[k][g] = pos / (len(ext) - 1) if len(ext) > 1 else 0.0
    ring_ids: list[np.ndarray] = []
    centers = []
    pole_start = pole_end = None
    for k, (kind, c, r, g) in enumerate(stations):
        c = np.asarray(c, dtype=np.float64)
        centers.append(c)
        grp = groups[g]
        if kind == "pole":
            part, uv = _chart(grp, s_of[k][g], 0.0, pole=True)
            vid = b.add_vertex(c, part, uv)
            if k == 0:
                pole_start = vid
            else:
                pole_end = vid
            ring_ids.append(np.array([vid]))
            continue
        ids = []
        for th in thetas:
            p = c + r[0] * np.cos(th) * e1 + r[1] * np.sin(th) * e2
            part, uv = _chart(grp, s_of[k][g], th)
            ids.append(b.add_vertex(p, part, uv))
        ring_ids.append(np.array(ids))

    for k in range(len(stations) - 1):
        g = gidx[k]
        grp = groups[g]
        sa, sb = s_of[k][g], s_of[k + 1][g]
        center = 0.5 * (centers[k] + centers[k + 1])
        ka, kb = stations[k][0], stations[k + 1][0]
        for i in range(n):
            t0, t1 = thetas[i], thetas[i] + TWO_PI / n
            tm = 0.5 * (t0 + t1)
            j = (i + 1) % n
            if ka == "ring" and kb == "ring":
                a0, a1 = ring_ids[k][i], ring_ids[k][j]
                b0, b1 = ring_ids[k + 1][i], ring_ids[k + 1][j]
                pa0 = _face_chart(grp, sa, t0, tm)
                pa1 = _face_chart(grp, sa, t1, tm)
                pb0 = _face_chart(grp, sb, t0, tm)
                pb1 = _face_chart(grp, sb, t1, tm)
                b.add_face((a0, a1, b1), pa0[0], (pa0[1], pa1[1], pb1[1]), center)
                b.add_face((a0, b1, b0), pa0[0], (pa0[1], pb1[1], pb0[1]), center)
            elif ka == "pole":
                p = ring_ids[k][0]
                c0, c1 = ring_ids[k + 1][i], ring_ids[k + 1][j]
                pp = _face_chart(grp, sa, tm, tm)
                q0 = _face_chart(grp, sb, t0, tm)
                q1 = _face_chart(grp, sb, t1, tm)
                b.add_face((p, c0, c1), q0[0], (pp[1], q0[1], q1[1]), center)
            else:
                p = ring_ids[k + 1][0]
                c0, c1 = ring_ids[k][i], ring_ids[k][j]
                pp = _face_chart(grp, sb, tm, tm)
                q0 = _face_chart(grp, sa, t0, tm)
                q1 = _face_chart(grp, sa, t1, tm)
                b.add_face((c0, c1, p), q0[0], (q0[1], q1[1], pp[1]), center)
    return _Tube(ring_ids, pole_start, pole_end, centers)


def bridge(b: _Builder, ring: np.ndarray, candidates: np.ndarray, group: _Group, center, s: float = -0.1) -> None:
    """Stitch a ring to its nearest candidate vertices with a strip of faces."""
    n = len(ring)
    cand = np.asarray(candidates)
    P = np.array([b.verts[c] for c in cand])
    nearest = []
    for v in ring:
        nearest.append(int(cand[np.argmin(((P - b.verts[v]) ** 2).sum(axis=1))]))
    for i in range(n):
        j = (i + 1) % n
        t0, t1 = TWO_PI * i / n, TWO_PI * (i + 1) / n
        tm = 0.5 * (t0 + t1)
        pr0 = _face_chart(group, 0.0, t0, tm)
        pr1 = _face_chart(group, 0.0, t1, tm)
        q0 = _face_chart(group, s, t0, tm)
        q1 = _face_chart(group, s, t1, tm)
        b.add_face((ring[i], ring[j], nearest[i]), pr0[0], (pr0[1], pr1[1], q0[1]), center)
        if nearest[j] != nearest[i]:
            b.add_face((ring[j], nearest[j], nearest[i]), pr0[0], (pr1[1], q1[1], q0[1]), center)


def _ring_stations(start, direction, length, radii, count, group, first_offset=0.0):
    d = np.asarray(direction, dtype=np.float64)
    d /= np.linalg.norm(d)
    out = []
    for i in range(count):
        t = first_offset + (length - first_offset) * i / max(count - 1, 1)
        r = radii[0] + (radii[1] - radii[0]) * (i / max(count - 1, 1))
        out.append(("ring", np.asarray(start) + t * d, (r, r), group))
    return out


PART_NAMES = (
    "torso_front", "torso_back", "head_front", "head_back",
    "l_upper_arm", "l_lower_arm", "r_upper_arm", "r_lower_arm",
    "l_upper_leg", "l_lower_leg", "r_upper_leg", "r_lower_leg",
)

RESOLUTIONS = {
    # n_trunk, torso_rings, head_rings, n_limb, segment_rings
    "small": (10, 5, 3, 6, 3),
    "desk": (12, 7, 4, 8, 4),
    "large": (16, 10, 6, 12, 5),
}


def capsule_man(resolution: str | tuple = "desk", texture_seed: int = 0) -> TemplateMesh:
    """Low-poly humanoid with 12 parts and 12 joints, pelvis at the origin.

    Resolutions ``small``/``desk``/``large`` give 230/394/742 vertices.
    """
    n_t, k_t, k_h, n_l, k_s = RESOLUTIONS[resolution] if isinstance(resolution, str) else resolution
    b = _Builder()

    # trunk: bottom pole, torso rings, head rings, top pole; vertical axis
    frame = (np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
    # ring angle a: x = rx cos a, z = rz sin a, so a in (0, pi) faces +z (the camera)
    groups = [_Group("halves", (1, 2)), _Group("halves", (3, 4))]
    stations = [("pole", (0.0, -0.12, 0.0), (0, 0), 0)]
    ys = np.linspace(-0.07, 0.58, k_t)
    for i, y in enumerate(ys):
        f = i / max(k_t - 1, 1)
        rx = 0.19 + 0.03 * np.sin(np.pi * f)
        rz = 0.14 - 0.02 * f
        stations.append(("ring", (0.0, y, 0.0), (rx, rz), 0))
    hy = np.linspace(0.68, 0.98, k_h)
    for i, y in enumerate(hy):
        f = i / max(k_h - 1, 1)
        r = 0.075 + 0.055 * np.sin(np.pi * min(0.25 + 0.75 * f, 1.0))
        stations.append(("ring", (0.0, y, 0.0), (r, r), 1))
    stations.append(("pole", (0.0, 1.04, 0.0), (0, 0), 1))
    trunk = build_tube(b, stations, groups, n_t, None, frame=frame)
    trunk_ids = np.arange(len(b.verts))

    limbs = {}
    limb_specs = {
        "l_arm": ((0.17, 0.48, 0.0), (1.0, 0.0, 0.0), 0.32, 0.30, (0.075, 0.065), (0.062, 0.05), 5, 6),
        "r_arm": ((-0.17, 0.48, 0.0), (-1.0, 0.0, 0.0), 0.32, 0.30, (0.075, 0.065), (0.062, 0.05), 7, 8),
        "l_leg": ((0.1, 0.02, 0.0), (0.0, -1.0, 0.0), 0.47, 0.45, (0.085, 0.075), (0.07, 0.055), 9, 10),
        "r_leg": ((-0.1, 0.02, 0.0), (0.0, -1.0, 0.0), 0.47, 0.45, (0.085, 0.075), (0.07, 0.055), 11, 12),
    }
    for name, (start, d, l_up, l_lo, r_up, r_lo, p_up, p_lo) in limb_specs.items():
        d = np.asarray(d, dtype=np.float64)
        start = np.asarray(start, dtype=np.float64)
        g = [_Group("annulus", (p_up,), 0.45, 0.15), _Group("annulus", (p_lo,), 0.45, 0.0)]
        st = _ring_stations(start, d, l_up, r_up, k_s, 0)
        elbow = start + (l_up + 0.5 * l_up / k_s) * d
        st += _ring_stations(start + l_up * d + l_up / k_s * d, d, l_lo, r_lo, k_s, 1)
        st.append(("pole", start + (l_up + l_up / k_s + l_lo + 0.05) * d, (0, 0), 1))
        first = len(b.verts)
        tube = build_tube(b, st, g, n_l, d)
        bridge(b, tube.ring_ids[0], trunk_ids, g[0], start - 0.05 * d)
        limbs[name] = dict(tube=tube, start=start, d=d, elbow=elbow, first=first, k_s=k_s, last=len(b.verts))

    verts = np.array(b.verts)
    nv = len(verts)
    ring = trunk.ring_ids
    # trunk stations: 0 pole, 1..k_t torso rings, k_t+1.. head rings
    pelvis = ring[2]
    head = ring[k_t + 1 + k_h // 2]
    groups_j = [pelvis, head]
    names = ["pelvis", "head"]
    for side in ("l", "r"):
        t = limbs[f"{side}_arm"]["tube"]
        groups_j += [t.ring_ids[0], np.concatenate([t.ring_ids[k_s - 1], t.ring_ids[k_s]]), t.ring_ids[2 * k_s - 1]]
        names += [f"{side}_shoulder", f"{side}_elbow", f"{side}_wrist"]
    for side in ("l", "r"):
        t = limbs[f"{side}_leg"]["tube"]
        groups_j += [np.concatenate([t.ring_ids[k_s - 1], t.ring_ids[k_s]]), t.ring_ids[2 * k_s - 1]]
        names += [f"{side}_knee", f"{side}_ankle"]
    W = JointRegressor.from_vertex_groups(groups_j, nv, names, root_index=0)
    shift = -(W.W[0] @ verts)  # pelvis joint at the origin
    verts = verts + shift

    template = TemplateMesh(
        vertices=verts,
        faces=np.array(b.faces),
        vertex_part=np.array(b.vpart),
        vertex_uv=np.array(b.vuv),
        part_count=12,
        joint_regressor=W,
        face_part=np.array(b.fpart),
        face_uv=np.array(b.fuv),
        part_names=PART_NAMES,
        texture_seed=texture_seed,
    )
    template.rig = _capsule_rig(template, trunk, limbs, k_t, k_h, k_s, shift)
    return template


def _capsule_rig(template, trunk, limbs, k_t, k_h, k_s, shift) -> Rig:
    nv = template.num_vertices
    verts = template.vertices
    bones: list[Bone] = []
    groups: dict[str, np.ndarray] = {}
    attach_height = verts[:, 1].copy()  # height driving the spine lean
    for name, L in limbs.items():
        rings = L["tube"].ring_ids
        lo = np.zeros(nv)
        up = np.zeros(nv)
        lower_ids = np.concatenate(rings[k_s:])
        upper_ids = np.concatenate(rings[:k_s])
        for r in rings[1:]:
            up[r] = 1.0
        up[rings[0]] = 0.5
        lo[lower_ids] = 1.0
        lo[rings[k_s]] = 0.75
        lo[rings[k_s - 1]] = 0.25
        ids = np.arange(L["first"], L["last"])
        attach_height[ids] = (L["start"] + shift)[1]
        elbow = L["elbow"] + shift
        bones.append(Bone(f"{name}_lower", elbow, 90.0, lo))
        groups[f"{name}_upper"] = upper_ids
        groups[f"{name}_lower"] = lower_ids
        bones_upper = Bone(f"{name}_upper", L["start"] + shift, 90.0, up)
        bones.append(bones_upper)
    head_rings = trunk.ring_ids[k_t + 1:]
    hw = np.zeros(nv)
    for r in head_rings:
        hw[r] = 1.0
    hw[head_rings[0]] = 0.5
    neck = trunk.centers[k_t + 1] + shift
    bones.append(Bone("head", neck, 45.0, hw))
    head_ids = np.concatenate(head_rings)
    attach_height[head_ids] = neck[1]
    top = verts[:, 1].max()
    lean = np.clip(attach_height / top, 0.0, 1.0)
    bones.append(Bone("spine", np.zeros(3), 15.0, lean, axis="horizontal"))
    bones.append(Bone("yaw", np.zeros(3), 30.0, np.ones(nv), axis=(0.0, 1.0, 0.0)))

    # edges whose endpoints move as one rigid body under every bone
    W = np.stack([bn.weights for bn in bones], axis=1)
    e = template.edges
    rigid = np.all(W[e[:, 0]] == W[e[:, 1]], axis=1)
    limb_ids = np.concatenate([np.arange(L["first"], L["last"]) for L in limbs.values()])
    in_limb = np.isin(e[:, 0], limb_ids) & np.isin(e[:, 1], limb_ids)
    return Rig(bones, groups, e[rigid & in_limb])


def capped_tube(n: int = 8, rings: int = 6, texture_seed: int = 0) -> TemplateMesh:
    """Vertical capped tube with four parts (lower/upper x front/back).

    With the defaults this has 50 vertices; handy for gradient checks.
    """
    b = _Builder()
    frame = (np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
    groups = [_Group("halves", (1, 2)), _Group("halves", (3, 4))]
    ys = np.linspace(-0.6, 0.6, rings)
    stations = [("pole", (0.0, -0.75, 0.0), (0, 0), 0)]
    for i, y in enumerate(ys):
        r = 0.3 + 0.08 * np.sin(np.pi * i / max(rings - 1, 1))
        stations.append(("ring", (0.0, y, 0.0), (r, 0.8 * r), 0 if i < rings // 2 else 1))
    stations.append(("pole", (0.0, 0.75, 0.0), (0, 0), 1))
    tube = build_tube(b, stations, groups, n, None, frame=frame)
    verts = np.array(b.verts)
    nv = len(verts)
    rids = tube.ring_ids[1:-1]
    picks = [rids[0], rids[len(rids) // 3], rids[2 * len(rids) // 3], rids[-1]]
    W = JointRegressor.from_vertex_groups(picks, nv, ("j0", "j1", "j2", "j3"), root_index=0)
    verts = verts - W.W[0] @ verts
    t = TemplateMesh(
        vertices=verts,
        faces=np.array(b.faces),
        vertex_part=np.array(b.vpart),
        vertex_uv=np.array(b.vuv),
        part_count=4,
        joint_regressor=W,
        face_part=np.array(b.fpart),
        face_uv=np.array(b.fuv),
        part_names=("lower_front", "lower_back", "upper_front", "upper_back"),
        texture_seed=texture_seed,
    )
    top = np.zeros(nv)
    upper = np.concatenate(tube.ring_ids[1 + rings // 2:])
    top[upper] = 1.0
    pivot = 0.5 * (tube.centers[rings // 2] + tube.centers[rings // 2 + 1]) - W.W[0] @ np.array(b.verts)
    t.rig = Rig([
        Bone("upper", pivot, 45.0, top),
        Bone("yaw", np.zeros(3), 30.0, np.ones(nv), axis=(0.0, 1.0, 0.0)),
    ])
    return t
