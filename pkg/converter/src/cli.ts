#!/usr/bin/env node
// Usage: ibmf-converter INPUT.npy OUTPUT.ibmf [--validate]

import { convert, validate } from './convert';

export function run(argv: string[]): number {
  const args = argv.filter((a) => a !== '--validate');
  const doValidate = argv.includes('--validate');
  if (args.length !== 2) {
    console.error('usage: ibmf-converter INPUT.npy OUTPUT.ibmf [--validate]');
    return 2;
  }
  const [input, output] = args;
  try {
    const manifest = convert(input, output);
    console.log(JSON.stringify(manifest));
    if (doValidate) {
      const report = validate(output, input);
      console.log(report.message);
      if (!report.pass) {
        return 1;
      }
    }
    return 0;
  } catch (err) {
    console.error(err instanceof Error ? err.message : String(err));
    return 1;
  }
}

if (require.main === module) {
  process.exit(run(process.argv.slice(2)));
}
