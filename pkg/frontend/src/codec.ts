/**
 * Binary embedding store codec (T2LEMB1).
 *
 * Layout (little-endian):
 *   magic   7 bytes  "T2LEMB1"
 *   count   u32
 *   dim     u32
 *   records, each: u16 key length, UTF-8 key bytes, dim * float32
 */

const MAGIC = Buffer.from("T2LEMB1", "ascii");

export interface StoreRecord {
  key: string;
  vector: Float32Array;
}

export function encodeStore(records: StoreRecord[], dim: number): Buffer {
  const chunks: Buffer[] = [];
  const header = Buffer.alloc(MAGIC.length + 8);
  MAGIC.copy(header, 0);
  header.writeUInt32LE(records.length, MAGIC.length);
  header.writeUInt32LE(dim, MAGIC.length + 4);
  chunks.push(header);
  for (const rec of records) {
    if (rec.vector.length !== dim) {
      throw new Error(`record ${rec.key}: dim ${rec.vector.length} != ${dim}`);
    }
    const keyBytes = Buffer.from(rec.key, "utf-8");
    if (keyBytes.length > 0xffff) {
      throw new Error(`record key too long (${keyBytes.length} bytes)`);
    }
    const head = Buffer.alloc(2);
    head.writeUInt16LE(keyBytes.length, 0);
    const data = Buffer.alloc(dim * 4);
    for (let i = 0; i < dim; i++) {
      data.writeFloatLE(rec.vector[i], i * 4);
    }
    chunks.push(head, keyBytes, data);
  }
  return Buffer.concat(chunks);
}

export function decodeStore(buf: Buffer): { dim: number; records: StoreRecord[] } {
  if (buf.length < MAGIC.length + 8 || !buf.subarray(0, MAGIC.length).equals(MAGIC)) {
    throw new Error("bad store magic");
  }
  let pos = MAGIC.length;
  const count = buf.readUInt32LE(pos);
  const dim = buf.readUInt32LE(pos + 4);
  pos += 8;
  const records: StoreRecord[] = [];
  for (let i = 0; i < count; i++) {
    if (pos + 2 > buf.length) throw new Error(`truncated record ${i} at byte ${pos}`);
    const keyLen = buf.readUInt16LE(pos);
    pos += 2;
    if (pos + keyLen + dim * 4 > buf.length) {
      throw new Error(`truncated record ${i} at byte ${pos}`);
    }
    const key = buf.subarray(pos, pos + keyLen).toString("utf-8");
    pos += keyLen;
    const vector = new Float32Array(dim);
    for (let j = 0; j < dim; j++) {
      vector[j] = buf.readFloatLE(pos + j * 4);
    }
    pos += dim * 4;
    records.push({ key, vector });
  }
  if (pos !== buf.length) {
    throw new Error(`${buf.length - pos} trailing bytes after record ${count - 1}`);
  }
  return { dim, records };
}
