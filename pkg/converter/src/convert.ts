import { createHash } from 'crypto';
import * as fs from 'fs';

import { readIbmf, writeIbmf } from './ibmf';
import { parseNpy, payloadAsFloat32 } from './npy';

export interface ConversionManifest {
  input: string;
  output: string;
  rows: number;
  cols: number;
  checksum: string; // sha256 of the float32 payload bytes
}

export interface ValidationReport {
  pass: boolean;
  message: string;
  mismatchOffset?: number;
}

export function convert(npyPath: string, outPath: string): ConversionManifest {
  const arr = parseNpy(fs.readFileSync(npyPath));
  const payload = payloadAsFloat32(arr);
  fs.writeFileSync(outPath, writeIbmf(arr.rows, arr.cols, payload));
  const manifest: ConversionManifest = {
    input: npyPath,
    output: outPath,
    rows: arr.rows,
    cols: arr.cols,
    checksum: createHash('sha256').update(payload).digest('hex'),
  };
  fs.writeFileSync(`${outPath}.manifest.json`, JSON.stringify(manifest, null, 2) + '\n');
  return manifest;
}

export function validate(ibmfPath: string, npyPath: string): ValidationReport {
  const matrix = readIbmf(fs.readFileSync(ibmfPath));
  const arr = parseNpy(fs.readFileSync(npyPath));
  if (matrix.rows !== arr.rows || matrix.cols !== arr.cols) {
    return {
      pass: false,
      message: `shape mismatch: IBMF is ${matrix.rows}x${matrix.cols}, ` +
        `NPY is ${arr.rows}x${arr.cols}`,
    };
  }
  const expected = payloadAsFloat32(arr);
  for (let i = 0; i < expected.length; i++) {
    if (matrix.payload[i] !== expected[i]) {
      return {
        pass: false,
        message: `payload mismatch at byte offset ${i}`,
        mismatchOffset: i,
      };
    }
  }
  return { pass: true, message: 'payloads are byte-identical after casting' };
}
