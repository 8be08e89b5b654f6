"""Token sharing and unsharing: the differentiable core mechanism.

`partition` splits an image into N patch vectors. `share` builds the
reduced token set: each selected superpatch (2x2 patches) is bilinearly
downsampled to one patch's size and projected with the SAME matrix as
ordinary patches, so M = N - 3S tokens remain. `unshare_tokens` /
`unshare_predictions` replicate each shared row back to its 4 patch
slots; `to_spatial` rearranges full-length token sets onto the patch
grid. All sharing ops are pure and differentiable where it matters
(projection weights and the positional table sit on the tape; pixel
content does not, since images are not parameters).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .policy import SharingPolicy
from .tensor import Tensor, gather_rows, matmul, resize_plane, reshape, transpose


@dataclass
class PatchGrid:
    patches: np.ndarray  # [N, 3*P*P], row i = C-order flattened [3, P, P]
    grid_hw: tuple  # (H/P, W/P)
    patch_size: int

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]


def partition(image: np.ndarray, patch_size: int) -> PatchGrid:
    """Split [3, H, W] into N = (H/P)(W/P) patch vectors, raster order."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"image must be [3, H, W], got {image.shape}")
    p = int(patch_size)
    _, h, w = image.shape
    if p < 1 or h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible into {p}x{p} patches")
    hp, wp = h // p, w // p
    patches = (
        image.reshape(3, hp, p, wp, p)
        .transpose(1, 3, 0, 2, 4)
        .reshape(hp * wp, 3 * p * p)
    )
    return PatchGrid(np.ascontiguousarray(patches), (hp, wp), p)


def reassemble(grid: PatchGrid) -> np.ndarray:
    """Inverse of partition; bit-exact."""
    hp, wp = grid.grid_hw
    p = grid.patch_size
    image = (
        grid.patches.reshape(hp, wp, 3, p, p)
        .transpose(2, 0, 3, 1, 4)
        .reshape(3, hp * p, wp * p)
    )
    return np.ascontiguousarray(image)


@dataclass
class TokenSet:
    tokens: Tensor  # [M, E]
    pos_embeds: Tensor  # [M, E]
    index_map: np.ndarray  # [N] -> token row for each patch slot
    shared_flags: np.ndarray  # [M] bool, true = token covers a superpatch

    def __post_init__(self):
        self.index_map = np.asarray(self.index_map, dtype=np.int64)
        self.shared_flags = np.asarray(self.shared_flags, dtype=bool)
        m = self.tokens.data.shape[0]
        n = self.index_map.size
        s = int(self.shared_flags.sum())
        if self.shared_flags.size != m or self.pos_embeds.data.shape != self.tokens.data.shape:
            raise DimensionError("token set fields disagree about M")
        if m != n - 3 * s:
            raise DimensionError(f"token count {m} != N - 3S = {n - 3 * s}")
        if n == 0 or self.index_map.min() < 0:
            raise DimensionError("index_map must be non-empty and non-negative")
        refs = np.bincount(self.index_map, minlength=m)
        want = np.where(self.shared_flags, 4, 1)
        if refs.size != m or not np.array_equal(refs, want):
            raise DimensionError("index_map slot counts do not match shared_flags")

    @property
    def num_tokens(self) -> int:
        return self.tokens.data.shape[0]

    @property
    def num_patches(self) -> int:
        return self.index_map.size

    @property
    def s_shared(self) -> int:
        return int(self.shared_flags.sum())


def share(grid: PatchGrid, pos_table: Tensor, policy: SharingPolicy,
          proj: Tensor) -> TokenSet:
    """Build the reduced token set T' = t_s(I, P).

    Token order is first occurrence in patch raster order: a shared token
    sits where its top-left patch would have been."""
    hp, wp = grid.grid_hw
    if hp % 2 or wp % 2:
        raise DimensionError(f"patch grid {hp}x{wp} has no exact superpatch grid")
    gh, gw = hp // 2, wp // 2
    if policy.share_grid.shape != (gh, gw):
        raise DimensionError(
            f"policy grid {policy.share_grid.shape} does not match superpatch grid {(gh, gw)}"
        )
    n = grid.num_patches
    d = grid.patches.shape[1]
    if proj.data.ndim != 2 or proj.data.shape[0] != d:
        raise DimensionError(f"projection must be [{d}, E], got {proj.data.shape}")
    e = proj.data.shape[1]
    if pos_table.data.shape != (n, e):
        raise DimensionError(
            f"positional table must be [{n}, {e}], got {pos_table.data.shape}"
        )

    p = grid.patch_size
    # Patch slot -> its superpatch, for selected superpatches only.
    members = {}
    for r, c in policy.ordered_shared:
        g = r * gw + c
        top_left = (2 * r) * wp + 2 * c
        members[g] = (top_left, top_left + 1, top_left + wp, top_left + wp + 1)
    slot_to_group = {
        slot: g for g, slots in members.items() for slot in slots
    }

    index_map = np.empty(n, dtype=np.int64)
    rows = []
    shared_flags = []
    weights = []  # rows of the [M, N] slot-averaging matrix for pos embeds
    token_of_group = {}
    for slot in range(n):
        g = slot_to_group.get(slot)
        if g is None:
            index_map[slot] = len(rows)
            rows.append(grid.patches[slot])
            shared_flags.append(False)
            weights.append(((slot,), 1.0))
        elif g in token_of_group:
            index_map[slot] = token_of_group[g]
        else:
            token_of_group[g] = len(rows)
            index_map[slot] = len(rows)
            rows.append(_downsampled_superpatch(grid, members[g]))
            shared_flags.append(True)
            weights.append((members[g], 0.25))

    m = len(rows)
    averaging = np.zeros((m, n))
    for row, (slots, value) in enumerate(weights):
        averaging[row, list(slots)] = value

    tokens = matmul(Tensor(np.array(rows)), proj)
    pos_embeds = matmul(Tensor(averaging), pos_table)
    return TokenSet(tokens, pos_embeds, index_map, np.array(shared_flags, dtype=bool))


def _downsampled_superpatch(grid: PatchGrid, slots) -> np.ndarray:
    """Assemble a superpatch's 2P x 2P pixels and bilinearly halve them."""
    p = grid.patch_size
    block = np.empty((3, 2 * p, 2 * p))
    corners = ((0, 0), (0, p), (p, 0), (p, p))
    for slot, (oy, ox) in zip(slots, corners):
        block[:, oy:oy + p, ox:ox + p] = grid.patches[slot].reshape(3, p, p)
    down = np.stack([resize_plane(block[ch], (p, p)) for ch in range(3)])
    return down.reshape(3 * p * p)


def unshare_tokens(values: Tensor, index_map: np.ndarray) -> Tensor:
    """Replicate each shared row back to its 4 patch slots: [M,D] -> [N,D].

    Upsampling a 1x1 cell bilinearly gives a constant, so replication is
    the exact t_u; gradients scatter-add back onto the shared rows."""
    index_map = np.asarray(index_map, dtype=np.int64)
    if values.data.ndim != 2:
        raise DimensionError(f"expected [M, D] values, got {values.data.shape}")
    m = values.data.shape[0]
    if index_map.ndim != 1 or index_map.size == 0 or index_map.min() < 0 \
            or index_map.max() >= m:
        raise DimensionError(f"index_map inconsistent with M={m}")
    return gather_rows(values, index_map)


def unshare_predictions(preds: Tensor, index_map: np.ndarray) -> Tensor:
    """Same replication as unshare_tokens, applied to per-token predictions
    after decoding (class scores instead of features)."""
    return unshare_tokens(preds, index_map)


def to_spatial(values: Tensor, grid_hw) -> Tensor:
    """Rearrange full-length [N, D] rows onto the patch grid as [D, Hl, Wl]."""
    hl, wl = (int(v) for v in grid_hw)
    if values.data.ndim != 2 or values.data.shape[0] != hl * wl:
        raise DimensionError(
            f"cannot arrange {values.data.shape} onto a {hl}x{wl} grid"
        )
    d = values.data.shape[1]
    return transpose(reshape(values, (hl, wl, d)), (2, 0, 1))


def pixel_roundtrip(image: np.ndarray, policy: SharingPolicy,
                    patch_size: int) -> np.ndarray:
    """Pixel-space share -> unshare: each selected superpatch is bilinearly
    halved and then upsampled back. Identity on superpatches of constant
    color; used to audit what information sharing discards."""
    image = np.asarray(image, dtype=np.float64)
    out = image.copy()
    sp = 2 * patch_size
    if image.ndim != 3 or image.shape[1] % sp or image.shape[2] % sp:
        raise DimensionError(f"image {image.shape} has no {sp}x{sp} superpatch grid")
    for r, c in policy.ordered_shared:
        block = image[:, r * sp:(r + 1) * sp, c * sp:(c + 1) * sp]
        for ch in range(image.shape[0]):
            down = resize_plane(block[ch], (patch_size, patch_size))
            out[ch, r * sp:(r + 1) * sp, c * sp:(c + 1) * sp] = resize_plane(down, (sp, sp))
    return out
