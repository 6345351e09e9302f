/** Export job runner: embed inputs, normalize, write the store. */

import { createHash } from "node:crypto";
import { promises as fs } from "node:fs";
import path from "node:path";

import { encodeStore, StoreRecord } from "./codec.js";
import { EmbeddingModel, l2Normalize, resolveModel } from "./model.js";

export interface ExportJob {
  /** Path to a UTF-8 file with one text per line (blank lines skipped). */
  textsFile?: string;
  /** Directory of image files embedded byte-wise. */
  imagesDir?: string;
  model: string;
  outPath: string;
  batchSize?: number;
}

export interface ExportReport {
  written: number;
  deduplicated: number;
  skipped: { item: string; reason: string }[];
  /** Cosine similarities of the first few records, pre-serialization. */
  sampleSimilarities: number[][];
}

export function contentKey(data: Buffer): string {
  return createHash("sha256").update(data).digest("hex");
}

interface PendingItem {
  key: string;
  label: string;
  kind: "text" | "image";
  payload: Buffer;
  text?: string;
}

async function collectItems(job: ExportJob, report: ExportReport): Promise<PendingItem[]> {
  const items: PendingItem[] = [];
  const seen = new Set<string>();

  const push = (item: PendingItem) => {
    if (seen.has(item.key)) {
      report.deduplicated += 1;
      return;
    }
    seen.add(item.key);
    items.push(item);
  };

  if (job.textsFile) {
    const raw = await fs.readFile(job.textsFile, "utf-8");
    for (const line of raw.split("\n")) {
      const text = line.trim();
      if (!text) continue;
      const payload = Buffer.from(text, "utf-8");
      push({ key: contentKey(payload), label: text, kind: "text", payload, text });
    }
  }
  if (job.imagesDir) {
    const names = (await fs.readdir(job.imagesDir)).sort();
    for (const name of names) {
      const full = path.join(job.imagesDir, name);
      try {
        const payload = await fs.readFile(full);
        push({ key: contentKey(payload), label: name, kind: "image", payload });
      } catch (err) {
        report.skipped.push({ item: full, reason: String(err) });
      }
    }
  }
  return items;
}

function cosine(a: Float64Array, b: Float64Array): number {
  let dot = 0;
  for (let i = 0; i < a.length; i++) dot += a[i] * b[i];
  return dot;
}

async function embedBatch(
  model: EmbeddingModel,
  batch: PendingItem[]
): Promise<Float64Array[]> {
  const texts = batch.filter((i) => i.kind === "text");
  const images = batch.filter((i) => i.kind === "image");
  const byKey = new Map<string, Float64Array>();
  if (texts.length) {
    const vecs = await model.embedTexts(texts.map((t) => t.text!));
    texts.forEach((t, i) => byKey.set(t.key, vecs[i]));
  }
  if (images.length) {
    const vecs = await model.embedImages(images.map((im) => im.payload));
    images.forEach((im, i) => byKey.set(im.key, vecs[i]));
  }
  return batch.map((item) => byKey.get(item.key)!);
}

/**
 * Run an export job; the written file parses with the pipeline's store
 * loader.  Unreadable inputs are skipped and reported; a model that cannot
 * be loaded aborts the whole job.
 */
export async function runExport(job: ExportJob): Promise<ExportReport> {
  const report: ExportReport = {
    written: 0,
    deduplicated: 0,
    skipped: [],
    sampleSimilarities: [],
  };
  const model = await resolveModel(job.model);
  const items = await collectItems(job, report);

  const records: StoreRecord[] = [];
  const vectors: Float64Array[] = [];
  const batchSize = Math.max(1, job.batchSize ?? 16);
  for (let lo = 0; lo < items.length; lo += batchSize) {
    const batch = items.slice(lo, lo + batchSize);
    const embedded = await embedBatch(model, batch);
    for (let i = 0; i < batch.length; i++) {
      const unit = l2Normalize(embedded[i]);
      vectors.push(unit);
      records.push({ key: batch[i].key, vector: Float32Array.from(unit) });
    }
  }

  const sample = Math.min(vectors.length, 10);
  for (let i = 0; i < sample; i++) {
    const row: number[] = [];
    for (let j = 0; j < sample; j++) row.push(cosine(vectors[i], vectors[j]));
    report.sampleSimilarities.push(row);
  }

  await fs.mkdir(path.dirname(path.resolve(job.outPath)), { recursive: true });
  await fs.writeFile(job.outPath, encodeStore(records, model.dim));
  report.written = records.length;
  return report;
}
