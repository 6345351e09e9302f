#!/usr/bin/env node
/**
 * embed-export --out store.emb [--texts lines.txt] [--images dir]
 *              [--model mock:512] [--batch-size 16]
 */

import { runExport } from "./export.js";

function parseArgs(argv: string[]): Map<string, string> {
  const out = new Map<string, string>();
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (!arg.startsWith("--")) throw new Error(`unexpected argument ${arg}`);
    const value = argv[i + 1];
    if (value === undefined) throw new Error(`missing value for ${arg}`);
    out.set(arg.slice(2), value);
    i += 1;
  }
  return out;
}

async function main(): Promise<number> {
  let args: Map<string, string>;
  try {
    args = parseArgs(process.argv.slice(2));
  } catch (err) {
    console.error(String(err));
    return 2;
  }
  const outPath = args.get("out");
  if (!outPath) {
    console.error("--out is required");
    return 2;
  }
  if (!args.get("texts") && !args.get("images")) {
    console.error("nothing to embed: pass --texts and/or --images");
    return 2;
  }
  try {
    const report = await runExport({
      textsFile: args.get("texts"),
      imagesDir: args.get("images"),
      model: args.get("model") ?? "mock:512",
      outPath,
      batchSize: args.get("batch-size") ? parseInt(args.get("batch-size")!, 10) : undefined,
    });
    console.log(
      `wrote ${report.written} records to ${outPath} ` +
        `(${report.deduplicated} duplicates collapsed, ${report.skipped.length} skipped)`
    );
    for (const skip of report.skipped) {
      console.error(`skipped ${skip.item}: ${skip.reason}`);
    }
    return 0;
  } catch (err) {
    console.error(String(err));
    return 1;
  }
}

main().then((code) => {
  process.exitCode = code;
});
