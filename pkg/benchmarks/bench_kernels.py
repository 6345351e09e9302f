"""Benchmark the compiled kernel core against the pure-numpy fallback.

Run `python benchmarks/bench_kernels.py`; shapes mirror the desk-scale
training workloads.  The conv lowering kernels dominate tokenizer and
SR-iTMO training time, the codebook scan runs once per training step, and
the RLE decoder is the hot loop when reading large .hdr panoramas.
"""

import time

import numpy as np

from panosynth import kernels


def timeit(fn, repeats=30):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e3


def bench_conv_lowering(backends):
    shapes = [
        ("tokenizer stem", (4, 16, 34, 66, 3, 2)),
        ("tokenizer mid", (4, 32, 18, 34, 3, 2)),
        ("sritmo encoder", (4, 64, 34, 34, 3, 1)),
    ]
    for label, (n, c, h, w, k, s) in shapes:
        x = np.ascontiguousarray(np.random.rand(n, c, h, w).astype(np.float32))
        print(f"  {label}: input {x.shape}, {k}x{k} kernel, stride {s}")
        cols = {}
        for name, impl in backends.items():
            ms = timeit(lambda: impl.im2col(x, k, k, s, s))
            cols[name] = np.ascontiguousarray(impl.im2col(x, k, k, s, s))
            print(f"    im2col  {name:6s} {ms:7.3f} ms")
        for name, impl in backends.items():
            ms = timeit(lambda: impl.col2im(cols[name], c, h, w, k, k, s, s))
            print(f"    col2im  {name:6s} {ms:7.3f} ms")


def bench_codebook(backends):
    vecs = np.random.rand(2048, 64)
    table = np.random.rand(256, 64)
    print(f"  nearest_codebook: {vecs.shape[0]} vectors x {table.shape[0]} entries")
    for name, impl in backends.items():
        ms = timeit(lambda: impl.nearest_codebook(vecs, table))
        print(f"    {name:6s} {ms:7.3f} ms")
    a = backends["numpy"].nearest_codebook(vecs, table)
    for name, impl in backends.items():
        assert np.array_equal(a, impl.nearest_codebook(vecs, table)), name


def bench_rle(backends):
    from panosynth.raster import HdrImage
    from panosynth.rgbe import encode_rgbe

    img = HdrImage(np.repeat(np.random.rand(512, 128, 3), 8, axis=1))
    data = encode_rgbe(img, rle=True)
    # find the first scanline body
    header_end = data.index(b"\n-Y") + data[data.index(b"\n-Y"):].index(b"\n", 1) + 1
    print(f"  rgbe_rle_decode: one {img.width}-px scanline, "
          f"{len(data) // 1024} KiB file")
    for name, impl in backends.items():
        ms = timeit(
            lambda: impl.rgbe_rle_decode(data, header_end + 4, img.width), repeats=200
        )
        print(f"    {name:6s} {ms:7.4f} ms")


def main():
    backends = {"numpy": kernels.get_backend("numpy")}
    try:
        backends["cython"] = kernels.get_backend("cython")
    except ImportError:
        print("compiled core not built; benchmarking the fallback only")
    print(f"selected backend: {kernels.BACKEND}\n")
    print("conv lowering:")
    bench_conv_lowering(backends)
    print("codebook scan:")
    bench_codebook(backends)
    print("RLE decode:")
    bench_rle(backends)


if __name__ == "__main__":
    main()
