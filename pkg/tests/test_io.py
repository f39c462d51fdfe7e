import struct

import numpy as np
import pytest

from boxtemplates.errors import InputError, ParseError
from boxtemplates.geometry import AABox, PointCloud
from boxtemplates.io import (Mesh, boxes_to_obj, load_cloud, load_geometry,
                             mesh_surface_samples, read_obj, read_ply, read_xyz, write_obj,
                             write_xyz, write_xyzl)

PTS = np.array([[0.1, 0.2, 0.3], [1.0, -2.5, 3.25], [1e-9, 7.0, -0.0]])


def test_xyz_round_trip_is_exact(tmp_path):
    write_xyz(tmp_path / "a.xyz", PTS)
    assert np.array_equal(read_xyz(tmp_path / "a.xyz").points, PTS)
    write_xyzl(tmp_path / "a.xyzl", PointCloud(PTS, np.array([2, 0, 1])))
    back = load_cloud(tmp_path / "a.xyzl")
    assert np.array_equal(back.points, PTS) and back.labels.tolist() == [2, 0, 1]
    with pytest.raises(InputError):
        write_xyzl(tmp_path / "b.xyzl", PointCloud(PTS))


def test_xyz_errors(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("1 2 3\n1 2\n")
    with pytest.raises(ParseError) as e:
        read_xyz(p)
    assert e.value.line == 2
    p.write_text("1 2 x\n")
    with pytest.raises(ParseError):
        read_xyz(p)
    with pytest.raises(InputError):
        read_xyz(tmp_path / "missing.xyz")
    with pytest.raises(InputError):
        load_geometry(tmp_path / "thing.stl")


def ply_header(fmt, n, extra=""):
    return (f"ply\nformat {fmt} 1.0\ncomment test\nelement vertex {n}\n"
            f"property float x\nproperty float y\nproperty float z\n{extra}"
            "element face 0\nproperty list uchar int vertex_indices\nend_header\n")


def test_ply_ascii(tmp_path):
    body = "".join(f"{x} {y} {z} 7\n" for x, y, z in PTS)
    p = tmp_path / "a.ply"
    p.write_text(ply_header("ascii", 3, "property uchar red\n") + body)
    assert np.allclose(read_ply(p).points, PTS)


@pytest.mark.parametrize("fmt,endian", [("binary_little_endian", "<"),
                                        ("binary_big_endian", ">")])
def test_ply_binary(tmp_path, fmt, endian):
    body = b"".join(struct.pack(endian + "fff", *row) for row in PTS)
    p = tmp_path / "b.ply"
    p.write_bytes(ply_header(fmt, 3).encode() + body)
    assert np.allclose(load_geometry(p).points, PTS.astype(np.float32))
    p.write_bytes(ply_header(fmt, 3).encode() + body[:-4])
    with pytest.raises(ParseError):
        read_ply(p)


def test_ply_rejects_garbage(tmp_path):
    p = tmp_path / "c.ply"
    p.write_text("not a ply")
    with pytest.raises(ParseError):
        read_ply(p)


def signed_volume(mesh):
    v = mesh.vertices
    return sum(np.dot(v[a], np.cross(v[b], v[c])) for a, b, c in mesh.faces) / 6.0


def test_box_obj_is_closed_and_outward(tmp_path):
    boxes = [AABox((0, 0, 0), (1, 2, 3)), AABox((5, 1, 0), (0.5, 0.5, 0.5))]
    text = boxes_to_obj(boxes, ["seat", "leg"])
    assert text.count("\nf ") + text.startswith("f ") == 24
    assert "g seat\n" in text and "g leg\n" in text
    p = tmp_path / "boxes.obj"
    p.write_text(text)
    m = read_obj(p)
    assert len(m.vertices) == 16
    first = Mesh(m.vertices, m.faces[:12])
    second = Mesh(m.vertices, m.faces[12:])
    assert signed_volume(first) == pytest.approx(6.0)
    assert signed_volume(second) == pytest.approx(0.125)


def test_obj_round_trip_and_sampling(tmp_path):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    mesh = Mesh(v, [[0, 1, 3, 2]])
    write_obj(tmp_path / "q.obj", mesh)
    back = read_obj(tmp_path / "q.obj")
    assert np.array_equal(back.vertices, v) and back.faces == [[0, 1, 3, 2]]
    s = mesh_surface_samples(back, 2000, seed=1)
    assert s.shape == (2000, 3) and np.all(s[:, 2] == 0)
    assert np.all((s[:, :2] >= 0) & (s[:, :2] <= 1))
    assert np.array_equal(s, mesh_surface_samples(back, 2000, seed=1))
    (tmp_path / "bad.obj").write_text("v 0 0 0\nf 1 2 3\n")
    with pytest.raises(ParseError):
        read_obj(tmp_path / "bad.obj")
