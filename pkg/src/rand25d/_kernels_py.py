"""Pure-Python fallback for the compiled projection kernels.

Same signatures and accumulation semantics as ``_kernels.pyx``; the rotation
stencil is applied as a sparse (a*b, a*b) matrix.
"""
import numpy as np
from scipy import sparse


def _rotation_matrix(idx, w):
    rows = np.repeat(np.arange(idx.shape[0]), 4)
    return sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(idx.shape[0], idx.shape[0]))


def project_max(vol, idx, w, a, b):
    rot = (_rotation_matrix(idx, w) @ vol).reshape(a, b, -1)
    arg = rot.argmax(axis=0).astype(np.int32)
    img = np.take_along_axis(rot, arg[None].astype(np.intp), axis=0)[0]
    return np.ascontiguousarray(img, dtype=vol.dtype), arg


def project_sum(vol, idx, w, a, b):
    rot = (_rotation_matrix(idx, w) @ vol).reshape(a, b, -1)
    return rot.sum(axis=0).astype(vol.dtype)


def smear_adjoint(img, idx, w, a, b, out):
    spread = np.broadcast_to(img, (a,) + img.shape).reshape(a * b, -1)
    out += _rotation_matrix(idx, w).T @ spread


def max_adjoint(g, arg, idx, w, b, out):
    c = g.shape[1]
    routed = np.zeros(out.shape, dtype=g.dtype)
    rows = arg.astype(np.intp) * b + np.arange(b)[:, None]
    routed[rows, np.arange(c)[None, :]] = g
    out += _rotation_matrix(idx, w).T @ routed
