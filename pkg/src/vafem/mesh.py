"""Conforming 2D triangulations with red-green refinement.

A :class:`Mesh` is an immutable snapshot of a conforming triangulation.
Topology (vertex deduplication, midpoint identification) is done with exact
rational coordinates, so repeated refinement never depends on floating-point
tolerances.  Refinement follows the classic red-green scheme: marked
triangles are split into four similar children through their edge midpoints,
single hanging nodes are removed by green bisection, and green triangles are
never subdivided themselves -- their parent is promoted to a red refinement
first, which keeps every element similar either to an initial triangle or to
a single green bisection of one (uniform shape regularity).
"""

from fractions import Fraction

import numpy as np

__all__ = [
    "Mesh",
    "MeshError",
    "PatchRef",
    "Prolongation",
    "VirtualRefinedPatch",
    "build_refined_patch",
    "facewise_patch",
    "lshape_mesh",
    "refine",
    "unit_square_mesh",
]


class MeshError(Exception):
    """Raised when a triangulation is not conforming or otherwise invalid."""


def _edge_key(a, b):
    return (a, b) if a < b else (b, a)


class Mesh:
    """Conforming triangulation of a polygonal domain.

    Attributes
    ----------
    vertices : ndarray, shape (V, 2)
        Vertex coordinates.
    elements : ndarray, shape (E, 3)
        Vertex indices per triangle, positively oriented.
    boundary_vertex : ndarray of bool, shape (V,)
        True for vertices on the domain boundary (an edge incident to a
        single element is a boundary edge; its endpoints are flagged).
    neighbor : ndarray, shape (E, 3)
        ``neighbor[e, k]`` is the element sharing the edge opposite local
        vertex ``k`` of element ``e``, or -1 on the boundary.
    green_flag : ndarray of bool, shape (E,)
        True for green (bisection) children.
    generation : ndarray, shape (E,)
        Refinement depth per element.
    element_parent : ndarray, shape (E,)
        Index of the containing element in the mesh this one was refined
        from; -1 where not applicable (initial meshes, and children of a
        promoted green pair, whose region spans both old halves).
    """

    def __init__(self, exact_vertices, elements, boundary_vertex=None,
                 green_flag=None, generation=None, element_parent=None,
                 green_parent_vertices=None, green_sibling=None):
        self.exact_vertices = list(exact_vertices)
        nv = len(self.exact_vertices)
        self.vertices = np.array(
            [[float(x), float(y)] for x, y in self.exact_vertices])
        elements = np.asarray(elements, dtype=np.int64).reshape(-1, 3)
        ne = elements.shape[0]
        if ne == 0:
            raise MeshError("mesh has no elements")
        if elements.min() < 0 or elements.max() >= nv:
            raise MeshError("element vertex index out of range")

        # enforce positive orientation (swap two vertices where needed)
        p = self.vertices
        d1 = p[elements[:, 1]] - p[elements[:, 0]]
        d2 = p[elements[:, 2]] - p[elements[:, 0]]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        if np.any(det == 0.0):
            raise MeshError("degenerate (zero-area) element")
        flip = det < 0.0
        elements = elements.copy()
        elements[flip, 1], elements[flip, 2] = (
            elements[flip, 2].copy(), elements[flip, 1].copy())
        self.elements = elements

        self.neighbor, edge_count = self._build_neighbors()

        if boundary_vertex is None:
            boundary_vertex = np.zeros(nv, dtype=bool)
            for (a, b), cnt in edge_count.items():
                if cnt == 1:
                    boundary_vertex[a] = True
                    boundary_vertex[b] = True
        self.boundary_vertex = np.asarray(boundary_vertex, dtype=bool)

        self.green_flag = (np.zeros(ne, dtype=bool) if green_flag is None
                           else np.asarray(green_flag, dtype=bool))
        self.generation = (np.zeros(ne, dtype=np.int64) if generation is None
                           else np.asarray(generation, dtype=np.int64))
        self.element_parent = (np.full(ne, -1, dtype=np.int64)
                               if element_parent is None
                               else np.asarray(element_parent, dtype=np.int64))
        # per green child: vertex triple of its (unsplit) parent triangle
        self.green_parent_vertices = (
            np.full((ne, 3), -1, dtype=np.int64)
            if green_parent_vertices is None
            else np.asarray(green_parent_vertices, dtype=np.int64))
        self.green_sibling = (np.full(ne, -1, dtype=np.int64)
                              if green_sibling is None
                              else np.asarray(green_sibling, dtype=np.int64))
        self._cache = {}

    def _build_neighbors(self):
        tri = self.elements
        ne = tri.shape[0]
        edge_map = {}
        for e in range(ne):
            v = tri[e]
            for k in range(3):
                key = _edge_key(int(v[(k + 1) % 3]), int(v[(k + 2) % 3]))
                edge_map.setdefault(key, []).append((e, k))
        neighbor = np.full((ne, 3), -1, dtype=np.int64)
        edge_count = {}
        for key, inc in edge_map.items():
            edge_count[key] = len(inc)
            if len(inc) == 2:
                (e1, k1), (e2, k2) = inc
                neighbor[e1, k1] = e2
                neighbor[e2, k2] = e1
            elif len(inc) > 2:
                raise MeshError(f"edge {key} shared by {len(inc)} elements")
        return neighbor, edge_count

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_elements(self):
        return self.elements.shape[0]

    def interior_vertices(self):
        """Indices of non-boundary vertices."""
        return np.nonzero(~self.boundary_vertex)[0]

    def areas(self):
        """Element areas, cached."""
        return self.geometry()[0]

    def gradients(self):
        """Gradients of the three barycentric coordinates per element,
        shape (E, 3, 2), cached."""
        return self.geometry()[1]

    def geometry(self):
        if "geom" not in self._cache:
            p = self.vertices
            tri = self.elements
            x = p[tri]                                # (E, 3, 2)
            d1 = x[:, 1] - x[:, 0]
            d2 = x[:, 2] - x[:, 0]
            det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
            area = 0.5 * det
            grads = np.empty((tri.shape[0], 3, 2))
            # grad of barycentric k: rotated opposite edge / (2 area)
            for k in range(3):
                b = x[:, (k + 1) % 3]
                c = x[:, (k + 2) % 3]
                grads[:, k, 0] = (b[:, 1] - c[:, 1]) / det
                grads[:, k, 1] = (c[:, 0] - b[:, 0]) / det
            self._cache["geom"] = (area, grads)
        return self._cache["geom"]

    def edge_lengths(self):
        """Edge lengths per element, shape (E, 3); entry k is the edge
        opposite local vertex k."""
        p = self.vertices[self.elements]
        out = np.empty((self.num_elements, 3))
        for k in range(3):
            d = p[:, (k + 1) % 3] - p[:, (k + 2) % 3]
            out[:, k] = np.hypot(d[:, 0], d[:, 1])
        return out

    def shape_ratios(self):
        """Longest edge divided by inradius, per element."""
        ell = self.edge_lengths()
        s = 0.5 * ell.sum(axis=1)
        inradius = self.areas() / s
        return ell.max(axis=1) / inradius

    def __repr__(self):
        return (f"Mesh({self.num_vertices} vertices, "
                f"{self.num_elements} elements)")


class PatchRef:
    """Element patch: an element together with its facewise neighbors."""

    def __init__(self, center, members):
        self.center = center
        self.members = list(members)

    def __repr__(self):
        return f"PatchRef(center={self.center}, members={self.members})"


class VirtualRefinedPatch:
    """Local triangulation of a red-refined element and green-bisected
    neighbors, used only to set up patch subproblems; never committed.

    Attributes
    ----------
    patch : PatchRef
        The parent patch.
    local_vertices : ndarray, shape (L, 2)
        Coordinates of the local vertices (parent corners plus midpoints).
    global_vertex : ndarray, shape (L,)
        Global vertex index for local vertices that exist in the mesh,
        -1 for the new midpoints.
    child_elements : ndarray, shape (C, 3)
        Local vertex indices per child triangle, positively oriented.
    child_parent : ndarray, shape (C,)
        Mesh element containing each child.
    interior_vertex_ids : list of int
        Local vertices strictly inside the patch and off the domain
        boundary; these carry the local hat basis.
    midpoint_endpoints : dict
        For midpoint local vertices, the pair of global vertex indices of
        the split edge.
    """

    def __init__(self, patch, local_vertices, global_vertex, child_elements,
                 child_parent, interior_vertex_ids, midpoint_endpoints):
        self.patch = patch
        self.local_vertices = local_vertices
        self.global_vertex = global_vertex
        self.child_elements = child_elements
        self.child_parent = child_parent
        self.interior_vertex_ids = interior_vertex_ids
        self.midpoint_endpoints = midpoint_endpoints

    @property
    def num_interior(self):
        return len(self.interior_vertex_ids)


class Prolongation:
    """Nodal interpolation from the interior dofs of a mesh onto the
    interior dofs of its refinement.

    Old vertices keep their values (zero on the boundary); each new
    midpoint takes the mean of its edge endpoint values, applied in
    creation order so cascaded midpoints see their endpoints first.
    Exact for P1 functions wherever the spaces nest, i.e. away from
    promoted green pairs (whose region is re-interpolated).
    """

    def __init__(self, old_interior, midpoints, new_interior, n_new_vertices,
                 n_old):
        self.old_interior = old_interior    # old interior vertex ids
        self.midpoints = midpoints          # (vid, a, b) in creation order
        self.new_interior = new_interior    # interior vertex ids, new mesh
        self.n_new_vertices = n_new_vertices
        self.n_old = n_old

    def apply(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[0] != self.n_old:
            raise ValueError("coefficient array does not match coarse mesh")
        vals = np.zeros(self.n_new_vertices)
        vals[self.old_interior] = coeffs
        for vid, a, b in self.midpoints:
            vals[vid] = 0.5 * (vals[a] + vals[b])
        return vals[self.new_interior]


def unit_square_mesh(n):
    """Uniform triangulation of the unit square.

    The (0,1) x (0,1) square is cut into an n-by-n grid of cells, each split
    along its bottom-left to top-right diagonal.

    Parameters
    ----------
    n : int
        Subdivisions per side, n >= 1.

    Returns
    -------
    Mesh
        (n+1)^2 vertices, 2 n^2 triangles, (n-1)^2 interior vertices.
    """
    if n < 1:
        raise ValueError("subdivision count must be at least 1")
    exact = []
    for j in range(n + 1):
        for i in range(n + 1):
            exact.append((Fraction(i, n), Fraction(j, n)))
    idx = lambda i, j: j * (n + 1) + i
    elements = []
    for j in range(n):
        for i in range(n):
            a = idx(i, j)
            b = idx(i + 1, j)
            c = idx(i + 1, j + 1)
            d = idx(i, j + 1)
            elements.append((a, b, c))
            elements.append((a, c, d))
    return Mesh(exact, elements)


def lshape_mesh(n):
    """Uniform triangulation of the L-shaped domain
    (-1,1)^2 minus the closed quadrant [0,1] x [-1,0].

    The three unit squares are meshed as in :func:`unit_square_mesh` and
    glued by exact coordinate matching; the re-entrant corner at the origin
    is a boundary vertex.

    Parameters
    ----------
    n : int
        Subdivisions per unit square side, n >= 1.
    """
    if n < 1:
        raise ValueError("subdivision count must be at least 1")
    coord_ids = {}
    exact = []

    def vid(x, y):
        key = (x, y)
        if key not in coord_ids:
            coord_ids[key] = len(exact)
            exact.append(key)
        return coord_ids[key]

    elements = []
    for ox, oy in ((-1, -1), (-1, 0), (0, 0)):
        for j in range(n):
            for i in range(n):
                x0 = ox + Fraction(i, n)
                x1 = ox + Fraction(i + 1, n)
                y0 = oy + Fraction(j, n)
                y1 = oy + Fraction(j + 1, n)
                a = vid(x0, y0)
                b = vid(x1, y0)
                c = vid(x1, y1)
                d = vid(x0, y1)
                elements.append((a, b, c))
                elements.append((a, c, d))
    return Mesh(exact, elements)


def facewise_patch(mesh, kappa):
    """Patch of ``kappa`` and its edge-adjacent elements."""
    if not 0 <= kappa < mesh.num_elements:
        raise IndexError(f"element index {kappa} out of range")
    members = [kappa]
    for nb in mesh.neighbor[kappa]:
        if nb >= 0:
            members.append(int(nb))
    return PatchRef(kappa, members)


def build_refined_patch(mesh, kappa):
    """Virtually refine the patch of ``kappa``: red-refine ``kappa`` and
    green-bisect each facewise neighbor from the shared edge midpoint to
    its opposite vertex.

    The interior vertices of the result are the local vertices not lying on
    the boundary of the patch polygon (equivalently: not incident to a local
    edge with a single child element); these are exactly the new midpoints
    off the domain boundary plus any original vertex fully surrounded by
    patch elements.
    """
    patch = facewise_patch(mesh, kappa)
    tri = mesh.elements
    pts = mesh.vertices

    local_of = {}
    coords = []
    global_vertex = []

    def local_vid(gv):
        if gv not in local_of:
            local_of[gv] = len(coords)
            coords.append(pts[gv].copy())
            global_vertex.append(gv)
        return local_of[gv]

    midpoint_of = {}
    midpoint_endpoints = {}

    def local_mid(ga, gb):
        key = _edge_key(ga, gb)
        if key not in midpoint_of:
            midpoint_of[key] = len(coords)
            midpoint_endpoints[len(coords)] = key
            coords.append(0.5 * (pts[ga] + pts[gb]))
            global_vertex.append(-1)
        return midpoint_of[key]

    children = []
    child_parent = []

    # red refinement of kappa
    va, vb, vc = (int(v) for v in tri[kappa])
    la, lb, lc = local_vid(va), local_vid(vb), local_vid(vc)
    mab = local_mid(va, vb)
    mbc = local_mid(vb, vc)
    mca = local_mid(vc, va)
    for child in ((la, mab, mca), (mab, lb, mbc), (mca, mbc, lc),
                  (mab, mbc, mca)):
        children.append(child)
        child_parent.append(kappa)

    # green bisection of each neighbor through the shared edge midpoint
    for nb in patch.members[1:]:
        nv = [int(v) for v in tri[nb]]
        shared = [v for v in nv if v in (va, vb, vc)]
        m = local_mid(shared[0], shared[1])
        # preserve the neighbor's orientation: replace one endpoint of the
        # shared edge by the midpoint in the original vertex cycle
        i0 = nv.index(shared[0])
        i1 = nv.index(shared[1])
        child1 = list(nv)
        child1[i1] = None
        child2 = list(nv)
        child2[i0] = None
        c1 = tuple(local_vid(v) if v is not None else m for v in child1)
        c2 = tuple(local_vid(v) if v is not None else m for v in child2)
        for child in (c1, c2):
            children.append(child)
            child_parent.append(int(nb))

    children = np.array(children, dtype=np.int64)
    coords = np.array(coords)

    # local boundary edges appear in exactly one child
    edge_count = {}
    for cverts in children:
        for k in range(3):
            key = _edge_key(int(cverts[(k + 1) % 3]), int(cverts[(k + 2) % 3]))
            edge_count[key] = edge_count.get(key, 0) + 1
    on_boundary = set()
    for (a, b), cnt in edge_count.items():
        if cnt == 1:
            on_boundary.add(a)
            on_boundary.add(b)
    interior = [v for v in range(len(coords)) if v not in on_boundary]

    return VirtualRefinedPatch(patch, coords, np.array(global_vertex),
                               children, np.array(child_parent), interior,
                               midpoint_endpoints)


def refine(mesh, marked):
    """Red-green refinement with conforming closure.

    Marked elements are red-refined.  Green children that are marked or
    receive a hanging node are replaced by a red refinement of their parent
    triangle.  Closure is tracked per edge: an edge counts as split exactly
    when its midpoint coordinate exists as a vertex, which stays correct
    across generation jumps (a promoted parent re-creates coarse half-edges
    whose midpoints a finer neighbor may already have introduced).  Elements
    with two or more split edges are red-refined in place, so cascades
    resolve inside the same fixed point; a single remaining split edge is
    removed by green bisection at emission.  The result is conforming by
    construction and verified by the Mesh constructor.

    Parameters
    ----------
    mesh : Mesh
    marked : iterable of int
        Nonempty set of element indices.

    Returns
    -------
    (Mesh, Prolongation)
        The refined mesh and the interior-dof interpolation operator.
    """
    marked = sorted(set(int(k) for k in marked))
    if not marked:
        raise ValueError("marked element set is empty")
    if marked[0] < 0 or marked[-1] >= mesh.num_elements:
        raise IndexError("marked element index out of range")

    exact = list(mesh.exact_vertices)
    coord_ids = {xy: i for i, xy in enumerate(exact)}
    mid_coord = {}          # edge key -> exact midpoint coordinate
    new_mid_endpoints = []  # (vertex id, endpoint a, endpoint b), in order

    def midpoint_coord(a, b):
        key = _edge_key(a, b)
        if key not in mid_coord:
            xa, ya = exact[a]
            xb, yb = exact[b]
            mid_coord[key] = ((xa + xb) / 2, (ya + yb) / 2)
        return mid_coord[key]

    def edge_is_split(a, b):
        return midpoint_coord(a, b) in coord_ids

    def get_midpoint(a, b):
        xy = midpoint_coord(a, b)
        if xy in coord_ids:
            return coord_ids[xy]
        vid = len(exact)
        exact.append(xy)
        coord_ids[xy] = vid
        new_mid_endpoints.append((vid, a, b))
        return vid

    # working element set; red refinement replaces elements in place
    elems = [tuple(int(v) for v in row) for row in mesh.elements]
    alive = [True] * len(elems)
    green = list(mesh.green_flag)
    gen = [int(g) for g in mesh.generation]
    gparent = [tuple(int(v) for v in row)
               for row in mesh.green_parent_vertices]
    gsib = [int(s) for s in mesh.green_sibling]
    origin = list(range(len(elems)))   # containing element of the old mesh
    forced = [False] * len(elems)

    def append(verts, is_green, g, gp, gs, org, force):
        elems.append(verts)
        alive.append(True)
        green.append(is_green)
        gen.append(g)
        gparent.append(gp)
        gsib.append(gs)
        origin.append(org)
        forced.append(force)
        return len(elems) - 1

    def promote(e):
        """Replace a green pair by its parent triangle, forced red."""
        alive[e] = False
        sib = gsib[e]
        if sib >= 0 and alive[sib]:
            alive[sib] = False
        return append(gparent[e], False, gen[e] - 1, (-1, -1, -1), -1,
                      -1, True)

    def red_refine(e):
        a, b, c = elems[e]
        alive[e] = False
        mab = get_midpoint(a, b)
        mbc = get_midpoint(b, c)
        mca = get_midpoint(c, a)
        g = gen[e] + 1
        org = origin[e]
        for verts in ((a, mab, mca), (mab, b, mbc), (mca, mbc, c),
                      (mab, mbc, mca)):
            append(verts, False, g, (-1, -1, -1), -1, org, False)

    for e in marked:
        if not alive[e]:
            continue
        if green[e]:
            promote(e)
        else:
            forced[e] = True

    changed = True
    while changed:
        changed = False
        for e in range(len(elems)):
            if not alive[e]:
                continue
            a, b, c = elems[e]
            h = (edge_is_split(a, b) + edge_is_split(b, c)
                 + edge_is_split(c, a))
            if green[e]:
                if h >= 1:
                    promote(e)
                    changed = True
            elif forced[e] or h >= 2:
                red_refine(e)
                changed = True

    new_elems = []
    new_green = []
    new_gen = []
    new_gparent = []
    new_gsib = []
    new_parent = []
    old_to_new = {}     # copied working elements: old sibling links remap

    def emit(verts, is_green, g, gp, gs, par):
        new_elems.append(verts)
        new_green.append(is_green)
        new_gen.append(g)
        new_gparent.append(gp)
        new_gsib.append(gs)
        new_parent.append(par)
        return len(new_elems) - 1

    for e in range(len(elems)):
        if not alive[e]:
            continue
        a, b, c = elems[e]
        verts = (a, b, c)
        split = [k for k in range(3)
                 if edge_is_split(verts[k], verts[(k + 1) % 3])]
        if not split:
            old_to_new[e] = emit(verts, green[e], gen[e], gparent[e],
                                 gsib[e], origin[e])
            continue
        k = split[0]
        va, vb = verts[k], verts[(k + 1) % 3]
        vc = verts[(k + 2) % 3]
        m = get_midpoint(va, vb)
        par = origin[e]
        i1 = emit((va, m, vc), True, gen[e] + 1, verts, -1, par)
        i2 = emit((m, vb, vc), True, gen[e] + 1, verts, -1, par)
        new_gsib[i1] = i2
        new_gsib[i2] = i1

    # copied green pairs survive together; rewrite their sibling links in
    # the new numbering (a stale working index would make a later
    # promotion remove the wrong element)
    for e, idx in old_to_new.items():
        gs = new_gsib[idx]
        if new_green[idx] and gs >= 0:
            new_gsib[idx] = old_to_new.get(gs, -1)

    new_mesh = Mesh(exact, new_elems, green_flag=new_green,
                    generation=new_gen, element_parent=new_parent,
                    green_parent_vertices=new_gparent, green_sibling=new_gsib)

    prol = Prolongation(mesh.interior_vertices(), new_mid_endpoints,
                        new_mesh.interior_vertices(),
                        new_mesh.num_vertices,
                        len(mesh.interior_vertices()))
    return new_mesh, prol
