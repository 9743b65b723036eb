"""Shared 64-bit direct-summation oracles for the loss terms."""

import math

import numpy as np


def oracle_inv(z: np.ndarray, zp: np.ndarray) -> float:
    b, r = z.shape
    total = 0.0
    for i in range(b):
        for j in range(r):
            d = float(z[i, j]) - float(zp[i, j])
            total += d * d
    return total / b


def oracle_var(z: np.ndarray, target: float, eps: float) -> float:
    b, r = z.shape
    total = 0.0
    for j in range(r):
        mean = sum(float(z[i, j]) for i in range(b)) / b
        var = sum((float(z[i, j]) - mean) ** 2 for i in range(b)) / (b - 1)
        total += max(0.0, target - math.sqrt(var + eps))
    return total / r


def oracle_cov_matrix(z: np.ndarray) -> np.ndarray:
    b, r = z.shape
    mean = [sum(float(z[i, j]) for i in range(b)) / b for j in range(r)]
    c = np.zeros((r, r))
    for i in range(b):
        for p in range(r):
            for q in range(r):
                c[p, q] += (float(z[i, p]) - mean[p]) * (float(z[i, q]) - mean[q])
    return c / (b - 1)


def oracle_cov(z: np.ndarray) -> float:
    c = oracle_cov_matrix(z)
    r = c.shape[0]
    total = 0.0
    for p in range(r):
        for q in range(r):
            if p != q:
                total += c[p, q] ** 2
    return total / r


def oracle_tier(z, zp, alpha, beta, gamma, target, eps) -> float:
    return (alpha * oracle_inv(z, zp)
            + beta * (oracle_var(z, target, eps) + oracle_var(zp, target, eps))
            + gamma * (oracle_cov(z) + oracle_cov(zp)))
