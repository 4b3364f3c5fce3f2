// NPY (versions 1.0 and 2.0) reader for 2-D little-endian float arrays.

export interface NpyArray {
  dtype: '<f4' | '<f8';
  rows: number;
  cols: number;
  /** raw payload bytes, row-major */
  payload: Buffer;
}

const MAGIC = Buffer.from('\x93NUMPY', 'latin1');

export class NpyError extends Error {}

function parseHeaderDict(header: string): { descr: string; fortran: boolean; shape: number[] } {
  const descr = header.match(/'descr'\s*:\s*'([^']+)'/);
  const fortran = header.match(/'fortran_order'\s*:\s*(True|False)/);
  const shape = header.match(/'shape'\s*:\s*\(([^)]*)\)/);
  if (!descr || !fortran || !shape) {
    throw new NpyError(`unparseable NPY header: ${header.trim()}`);
  }
  const dims = shape[1]
    .split(',')
    .map((s) => s.trim())
    .filter((s) => s.length > 0)
    .map((s) => {
      const n = Number(s);
      if (!Number.isInteger(n) || n < 0) {
        throw new NpyError(`bad shape entry ${s} in NPY header`);
      }
      return n;
    });
  return { descr: descr[1], fortran: fortran[1] === 'True', shape: dims };
}

export function parseNpy(buf: Buffer): NpyArray {
  if (buf.length < 10 || !buf.subarray(0, 6).equals(MAGIC)) {
    throw new NpyError('not an NPY file (bad magic)');
  }
  const major = buf[6];
  const minor = buf[7];
  if (major !== 1 && major !== 2) {
    throw new NpyError(`unsupported NPY version ${major}.${minor}`);
  }
  let headerLen: number;
  let headerStart: number;
  if (major === 1) {
    headerLen = buf.readUInt16LE(8);
    headerStart = 10;
  } else {
    headerLen = buf.readUInt32LE(8);
    headerStart = 12;
  }
  const header = buf.subarray(headerStart, headerStart + headerLen).toString('latin1');
  const { descr, fortran, shape } = parseHeaderDict(header);
  if (descr !== '<f4' && descr !== '<f8') {
    throw new NpyError(`unsupported dtype ${descr}: expected <f4 or <f8`);
  }
  if (shape.length !== 2) {
    throw new NpyError(`expected a 2-D array, got shape (${shape.join(', ')})`);
  }
  if (fortran) {
    throw new NpyError('fortran-ordered arrays are not supported');
  }
  const [rows, cols] = shape;
  const itemSize = descr === '<f4' ? 4 : 8;
  const payload = buf.subarray(headerStart + headerLen);
  const want = rows * cols * itemSize;
  if (payload.length !== want) {
    throw new NpyError(`payload is ${payload.length} bytes, expected ${want}`);
  }
  return { dtype: descr, rows, cols, payload: Buffer.from(payload) };
}

/** Payload as float32 bytes; float64 input is narrowed with round-to-nearest. */
export function payloadAsFloat32(arr: NpyArray): Buffer {
  if (arr.dtype === '<f4') {
    return arr.payload;
  }
  const count = arr.rows * arr.cols;
  const out = Buffer.allocUnsafe(count * 4);
  for (let i = 0; i < count; i++) {
    out.writeFloatLE(Math.fround(arr.payload.readDoubleLE(i * 8)), i * 4);
  }
  return out;
}
