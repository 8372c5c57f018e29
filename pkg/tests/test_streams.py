import numpy as np

from weakiv.streams import Stream, root_stream


def test_same_key_same_draws():
    a = root_stream(7).uniforms((100,))
    b = root_stream(7).uniforms((100,))
    assert np.array_equal(a, b)


def test_repeated_calls_are_stateless():
    s = root_stream(3)
    assert np.array_equal(s.uniforms((16,)), s.uniforms((16,)))


def test_child_keys_extend():
    s = root_stream(1)
    assert s.child(2, 5).key == s.child(2).child(5).key
    assert np.array_equal(s.child(2, 5).normals((8,)), s.child(2).child(5).normals((8,)))


def test_children_disjoint():
    s = root_stream(0)
    a = s.child(0).uniforms((64,))
    b = s.child(1).uniforms((64,))
    assert not np.array_equal(a, b)
    # child draws do not consume or depend on parent draws
    c = s.child(0).uniforms((64,))
    s.uniforms((1000,))
    assert np.array_equal(a, c)


def test_uniforms_open_interval():
    u = root_stream(11).uniforms((200_000,))
    assert u.min() > 0.0
    assert u.max() < 1.0


def test_normals_moments():
    x = root_stream(5).normals((200_000,))
    n = x.size
    assert abs(x.mean()) < 4.0 / np.sqrt(n)
    assert abs(x.var() - 1.0) < 4.0 * np.sqrt(2.0 / n)


def test_shapes():
    s = root_stream(2)
    assert s.uniforms((3, 4)).shape == (3, 4)
    assert s.normals((2, 5)).shape == (2, 5)


def test_negative_tags_allowed():
    s = Stream(key=(np.uint64(1),))
    t = s.child(-1)
    assert np.isfinite(t.normals((4,))).all()
