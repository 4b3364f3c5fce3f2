// IBMF matrix container: "IBMF" magic, u32 LE version (1 = float32
// payload), u64 LE rows, u64 LE cols, then rows*cols float32 LE row-major.

export const IBMF_MAGIC = 'IBMF';
export const HEADER_BYTES = 24;

export class IbmfError extends Error {}

export interface IbmfMatrix {
  rows: number;
  cols: number;
  payload: Buffer; // float32 LE
}

export function writeIbmf(rows: number, cols: number, payload: Buffer): Buffer {
  if (payload.length !== rows * cols * 4) {
    throw new IbmfError(
      `payload is ${payload.length} bytes, expected ${rows * cols * 4}`);
  }
  const header = Buffer.allocUnsafe(HEADER_BYTES);
  header.write(IBMF_MAGIC, 0, 'latin1');
  header.writeUInt32LE(1, 4);
  header.writeBigUInt64LE(BigInt(rows), 8);
  header.writeBigUInt64LE(BigInt(cols), 16);
  return Buffer.concat([header, payload]);
}

export function readIbmf(buf: Buffer): IbmfMatrix {
  if (buf.length < HEADER_BYTES) {
    throw new IbmfError('file shorter than the IBMF header');
  }
  if (buf.subarray(0, 4).toString('latin1') !== IBMF_MAGIC) {
    throw new IbmfError(`bad magic ${JSON.stringify(buf.subarray(0, 4).toString('latin1'))}`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== 1) {
    throw new IbmfError(`unsupported IBMF version ${version}`);
  }
  const rows = Number(buf.readBigUInt64LE(8));
  const cols = Number(buf.readBigUInt64LE(16));
  const payload = buf.subarray(HEADER_BYTES);
  if (payload.length !== rows * cols * 4) {
    throw new IbmfError(
      `payload is ${payload.length} bytes, expected ${rows * cols * 4}`);
  }
  return { rows, cols, payload: Buffer.from(payload) };
}
