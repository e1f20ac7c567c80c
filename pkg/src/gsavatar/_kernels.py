"""Numba kernels for per-pixel splat compositing (forward, reference, backward).

All kernels are single-threaded and iterate contributions in globally
depth-sorted order, so results are bitwise reproducible. Arrays arriving here
are already culled and sorted by (depth, original index).
"""

import numba as nb
import numpy as np


@nb.njit(cache=True)
def count_tile_entries(tx0, tx1, ty0, ty1, tiles_x, tiles_y):
    counts = np.zeros(tiles_x * tiles_y, dtype=np.int64)
    for g in range(tx0.shape[0]):
        for ty in range(ty0[g], ty1[g] + 1):
            for tx in range(tx0[g], tx1[g] + 1):
                counts[ty * tiles_x + tx] += 1
    return counts


@nb.njit(cache=True)
def fill_tile_entries(tx0, tx1, ty0, ty1, tiles_x, starts, out_idx):
    cursor = starts.copy()
    for g in range(tx0.shape[0]):
        for ty in range(ty0[g], ty1[g] + 1):
            for tx in range(tx0[g], tx1[g] + 1):
                t = ty * tiles_x + tx
                out_idx[cursor[t]] = g
                cursor[t] += 1


@nb.njit(cache=True)
def forward_tiled(mean2d, invcov, alpha, color, normal, depth,
                  tile_idx, tile_start, tile_count, tiles_x, tiles_y, tile_size,
                  width, height, bg, alpha_cutoff, stop_t, alpha_clamp,
                  rgb, alpha_img, normal_img, depth_img, count_img, final_t):
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            s = tile_start[t]
            e = s + tile_count[t]
            y_end = min(height, (ty + 1) * tile_size)
            x_end = min(width, (tx + 1) * tile_size)
            for py in range(ty * tile_size, y_end):
                for px in range(tx * tile_size, x_end):
                    trans = 1.0
                    r = 0.0
                    g_ = 0.0
                    b = 0.0
                    nx = 0.0
                    ny = 0.0
                    nz = 0.0
                    dsum = 0.0
                    cnt = 0
                    for ii in range(s, e):
                        gi = tile_idx[ii]
                        dx = (px + 0.5) - mean2d[gi, 0]
                        dy = (py + 0.5) - mean2d[gi, 1]
                        power = (-0.5 * (invcov[gi, 0] * dx * dx + invcov[gi, 2] * dy * dy)
                                 - invcov[gi, 1] * dx * dy)
                        aprime = alpha[gi] * np.exp(power)
                        if aprime > alpha_clamp:
                            aprime = alpha_clamp
                        if aprime < alpha_cutoff:
                            continue
                        w = trans * aprime
                        r += w * color[gi, 0]
                        g_ += w * color[gi, 1]
                        b += w * color[gi, 2]
                        nx += w * normal[gi, 0]
                        ny += w * normal[gi, 1]
                        nz += w * normal[gi, 2]
                        dsum += w * depth[gi]
                        cnt += 1
                        trans *= 1.0 - aprime
                        if trans < stop_t:
                            break
                    rgb[py, px, 0] = r + trans * bg[0]
                    rgb[py, px, 1] = g_ + trans * bg[1]
                    rgb[py, px, 2] = b + trans * bg[2]
                    a = 1.0 - trans
                    alpha_img[py, px] = a
                    normal_img[py, px, 0] = nx
                    normal_img[py, px, 1] = ny
                    normal_img[py, px, 2] = nz
                    depth_img[py, px] = dsum / a if cnt > 0 else 0.0
                    count_img[py, px] = cnt
                    final_t[py, px] = trans


@nb.njit(cache=True)
def forward_reference(mean2d, invcov, alpha, color, normal, depth,
                      width, height, bg, alpha_cutoff, stop_t, alpha_clamp,
                      rgb, alpha_img, normal_img, depth_img, count_img, final_t):
    n = mean2d.shape[0]
    for py in range(height):
        for px in range(width):
            trans = 1.0
            r = 0.0
            g_ = 0.0
            b = 0.0
            nx = 0.0
            ny = 0.0
            nz = 0.0
            dsum = 0.0
            cnt = 0
            for gi in range(n):
                dx = (px + 0.5) - mean2d[gi, 0]
                dy = (py + 0.5) - mean2d[gi, 1]
                power = (-0.5 * (invcov[gi, 0] * dx * dx + invcov[gi, 2] * dy * dy)
                         - invcov[gi, 1] * dx * dy)
                aprime = alpha[gi] * np.exp(power)
                if aprime > alpha_clamp:
                    aprime = alpha_clamp
                if aprime < alpha_cutoff:
                    continue
                w = trans * aprime
                r += w * color[gi, 0]
                g_ += w * color[gi, 1]
                b += w * color[gi, 2]
                nx += w * normal[gi, 0]
                ny += w * normal[gi, 1]
                nz += w * normal[gi, 2]
                dsum += w * depth[gi]
                cnt += 1
                trans *= 1.0 - aprime
                if trans < stop_t:
                    break
            rgb[py, px, 0] = r + trans * bg[0]
            rgb[py, px, 1] = g_ + trans * bg[1]
            rgb[py, px, 2] = b + trans * bg[2]
            a = 1.0 - trans
            alpha_img[py, px] = a
            normal_img[py, px, 0] = nx
            normal_img[py, px, 1] = ny
            normal_img[py, px, 2] = nz
            depth_img[py, px] = dsum / a if cnt > 0 else 0.0
            count_img[py, px] = cnt
            final_t[py, px] = trans


@nb.njit(cache=True)
def backward_tiled(mean2d, invcov, alpha, color, normal,
                   tile_idx, tile_start, tile_count, tiles_x, tiles_y, tile_size,
                   width, height, bg, alpha_cutoff, alpha_clamp,
                   count_img, final_t, grad_rgb, grad_alpha, grad_normal,
                   g_mean2d, g_invcov, g_alpha, g_color, g_normal):
    # Scratch for the per-pixel replay of accepted contributions.
    max_len = 0
    for t in range(tile_count.shape[0]):
        if tile_count[t] > max_len:
            max_len = tile_count[t]
    sidx = np.empty(max_len, dtype=np.int64)
    sap = np.empty(max_len, dtype=np.float64)

    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            s = tile_start[t]
            e = s + tile_count[t]
            y_end = min(height, (ty + 1) * tile_size)
            x_end = min(width, (tx + 1) * tile_size)
            for py in range(ty * tile_size, y_end):
                for px in range(tx * tile_size, x_end):
                    target = count_img[py, px]
                    if target == 0:
                        continue
                    # Replay the forward acceptance tests; the stop rule is
                    # implied by the stored contribution count.
                    k = 0
                    for ii in range(s, e):
                        if k == target:
                            break
                        gi = tile_idx[ii]
                        dx = (px + 0.5) - mean2d[gi, 0]
                        dy = (py + 0.5) - mean2d[gi, 1]
                        power = (-0.5 * (invcov[gi, 0] * dx * dx + invcov[gi, 2] * dy * dy)
                                 - invcov[gi, 1] * dx * dy)
                        aprime = alpha[gi] * np.exp(power)
                        if aprime > alpha_clamp:
                            aprime = alpha_clamp
                        if aprime < alpha_cutoff:
                            continue
                        sidx[k] = gi
                        sap[k] = aprime
                        k += 1

                    gr = grad_rgb[py, px, 0]
                    gg = grad_rgb[py, px, 1]
                    gb = grad_rgb[py, px, 2]
                    ga = grad_alpha[py, px]
                    gnx = grad_normal[py, px, 0]
                    gny = grad_normal[py, px, 1]
                    gnz = grad_normal[py, px, 2]

                    tcur = final_t[py, px]
                    accum = tcur * (bg[0] * gr + bg[1] * gg + bg[2] * gb - ga)
                    for j in range(k - 1, -1, -1):
                        gi = sidx[j]
                        ap = sap[j]
                        ti = tcur / (1.0 - ap)
                        d_i = (color[gi, 0] * gr + color[gi, 1] * gg + color[gi, 2] * gb
                               + normal[gi, 0] * gnx + normal[gi, 1] * gny
                               + normal[gi, 2] * gnz)
                        gap = ti * d_i - accum / (1.0 - ap)
                        w = ti * ap
                        g_color[gi, 0] += w * gr
                        g_color[gi, 1] += w * gg
                        g_color[gi, 2] += w * gb
                        g_normal[gi, 0] += w * gnx
                        g_normal[gi, 1] += w * gny
                        g_normal[gi, 2] += w * gnz
                        if ap < alpha_clamp:
                            # alpha' = alpha * exp(power); both factors live.
                            g_alpha[gi] += gap * (ap / alpha[gi])
                            gpow = gap * ap
                            dx = (px + 0.5) - mean2d[gi, 0]
                            dy = (py + 0.5) - mean2d[gi, 1]
                            g_mean2d[gi, 0] += gpow * (invcov[gi, 0] * dx + invcov[gi, 1] * dy)
                            g_mean2d[gi, 1] += gpow * (invcov[gi, 1] * dx + invcov[gi, 2] * dy)
                            g_invcov[gi, 0] += gpow * (-0.5 * dx * dx)
                            g_invcov[gi, 1] += gpow * (-dx * dy)
                            g_invcov[gi, 2] += gpow * (-0.5 * dy * dy)
                        accum += w * d_i
                        tcur = ti
