import { describe, expect, it } from "vitest";

import { decodeStore, encodeStore, StoreRecord } from "../src/codec.js";
import { DeterministicModel, l2Normalize } from "../src/model.js";

function unitVector(dim: number, seed: number): Float32Array {
  const v = new Float64Array(dim);
  for (let i = 0; i < dim; i++) v[i] = Math.sin(seed * 31 + i * 7) + 0.01;
  return Float32Array.from(l2Normalize(v));
}

describe("store codec", () => {
  it("roundtrips records bitwise", () => {
    const records: StoreRecord[] = [
      { key: "aaa", vector: unitVector(8, 1) },
      { key: "bbb-long-key", vector: unitVector(8, 2) },
    ];
    const buf = encodeStore(records, 8);
    const back = decodeStore(buf);
    expect(back.dim).toBe(8);
    expect(back.records.map((r) => r.key)).toEqual(["aaa", "bbb-long-key"]);
    for (let i = 0; i < records.length; i++) {
      expect(Array.from(back.records[i].vector)).toEqual(
        Array.from(records[i].vector)
      );
    }
  });

  it("writes the documented header", () => {
    const buf = encodeStore([{ key: "k", vector: unitVector(512, 3) }], 512);
    expect(buf.subarray(0, 7).toString("ascii")).toBe("T2LEMB1");
    expect(buf.readUInt32LE(7)).toBe(1);
    expect(buf.readUInt32LE(11)).toBe(512);
  });

  it("accepts an empty store", () => {
    const buf = encodeStore([], 64);
    const back = decodeStore(buf);
    expect(back.records).toHaveLength(0);
    expect(back.dim).toBe(64);
  });

  it("rejects truncated buffers", () => {
    const buf = encodeStore([{ key: "k", vector: unitVector(8, 4) }], 8);
    expect(() => decodeStore(buf.subarray(0, buf.length - 4))).toThrow(/truncated/);
  });

  it("rejects bad magic", () => {
    const buf = Buffer.from("NOTMAGIC-and-more-bytes");
    expect(() => decodeStore(buf)).toThrow(/magic/);
  });
});

describe("deterministic model", () => {
  it("is stable across calls", async () => {
    const model = new DeterministicModel(32);
    const [a] = await model.embedTexts(["hello world"]);
    const [b] = await model.embedTexts(["hello world"]);
    expect(Array.from(a)).toEqual(Array.from(b));
  });

  it("produces unit vectors", async () => {
    const model = new DeterministicModel(64);
    const vecs = await model.embedTexts(["one", "two", "three"]);
    for (const v of vecs) {
      let sq = 0;
      for (const x of v) sq += x * x;
      expect(Math.abs(Math.sqrt(sq) - 1)).toBeLessThan(1e-9);
    }
  });

  it("separates distinct inputs", async () => {
    const model = new DeterministicModel(64);
    const [a, b] = await model.embedTexts(["alpha", "beta"]);
    let dot = 0;
    for (let i = 0; i < 64; i++) dot += a[i] * b[i];
    expect(Math.abs(dot)).toBeLessThan(0.9);
  });
});
