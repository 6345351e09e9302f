/** Embedding model providers. */

import { createHash } from "node:crypto";

export interface EmbeddingModel {
  readonly id: string;
  readonly dim: number;
  embedTexts(texts: string[]): Promise<Float64Array[]>;
  embedImages(images: Buffer[]): Promise<Float64Array[]>;
}

export function l2Normalize(v: Float64Array): Float64Array {
  let sq = 0;
  for (const x of v) sq += x * x;
  const norm = Math.sqrt(sq);
  if (norm === 0) throw new Error("cannot normalize a zero vector");
  return v.map((x) => x / norm) as Float64Array;
}

/**
 * Deterministic content-hash model for offline use and tests.
 *
 * Vectors are expanded from SHA-256 of the input bytes, so identical inputs
 * embed identically on every platform.  Not semantic; selected with the
 * model id `mock:<dim>`.
 */
export class DeterministicModel implements EmbeddingModel {
  readonly id: string;
  readonly dim: number;

  constructor(dim: number) {
    this.id = `mock:${dim}`;
    this.dim = dim;
  }

  private vectorFor(data: Buffer): Float64Array {
    const out = new Float64Array(this.dim);
    let block = 0;
    let filled = 0;
    while (filled < this.dim) {
      const counter = Buffer.alloc(4);
      counter.writeUInt32LE(block, 0);
      const digest = createHash("sha256").update(data).update(counter).digest();
      for (let off = 0; off + 4 <= digest.length && filled < this.dim; off += 4) {
        const u = digest.readUInt32LE(off);
        out[filled] = u / 2 ** 31 - 1.0; // uniform in [-1, 1)
        filled += 1;
      }
      block += 1;
    }
    return l2Normalize(out);
  }

  async embedTexts(texts: string[]): Promise<Float64Array[]> {
    return texts.map((t) => this.vectorFor(Buffer.from(t, "utf-8")));
  }

  async embedImages(images: Buffer[]): Promise<Float64Array[]> {
    return images.map((b) => this.vectorFor(b));
  }
}

/**
 * Resolve a model identifier.
 *
 * `mock:<dim>` gives the deterministic offline model; anything else is
 * treated as a pretrained vision-language checkpoint loaded through
 * `@xenova/transformers`, which must be installed and have the weights
 * available locally -- otherwise the export aborts.
 */
export async function resolveModel(id: string): Promise<EmbeddingModel> {
  const mock = /^mock:(\d+)$/.exec(id);
  if (mock) {
    return new DeterministicModel(parseInt(mock[1], 10));
  }
  let transformers: any;
  try {
    transformers = await import("@xenova/transformers" as string);
  } catch {
    throw new Error(
      `model ${id}: @xenova/transformers is not installed; ` +
        "use mock:<dim> for offline runs"
    );
  }
  const extractor = await transformers.pipeline("feature-extraction", id);
  const dim = extractor.model.config.hidden_size ?? 512;
  return {
    id,
    dim,
    async embedTexts(texts: string[]) {
      const out: Float64Array[] = [];
      for (const text of texts) {
        const res = await extractor(text, { pooling: "mean", normalize: true });
        out.push(l2Normalize(Float64Array.from(res.data as number[])));
      }
      return out;
    },
    async embedImages() {
      throw new Error(`model ${id}: image embedding requires a CLIP pipeline`);
    },
  };
}
