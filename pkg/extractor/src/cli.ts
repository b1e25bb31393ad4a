#!/usr/bin/env node
/**
 * extract --input DIR --labels CSV --backbone NAME --out DIR [--batch-size N]
 *
 * Turns a directory of per-slide patch images into fvslide slide packs plus
 * the manifest CSV the pipeline consumes. Exit codes: 0 success, 1 bad
 * arguments or inputs, 2 I/O failure.
 */

import { parseArgs } from 'node:util'

import { DEFAULT_SPEC, extract } from './extract.js'
import { ZOO } from './backbone.js'

function usage(): string {
  return (
    'usage: extract --input DIR --labels CSV --backbone NAME --out DIR\n' +
    '               [--batch-size N] [--patch-size N] [--classes a,b,...]\n' +
    `backbones: ${Object.keys(ZOO).join(', ')}`
  )
}

export async function main(argv: string[]): Promise<number> {
  let values
  try {
    values = parseArgs({
      args: argv,
      options: {
        input: { type: 'string' },
        labels: { type: 'string' },
        backbone: { type: 'string', default: 'micro-cnn-64' },
        out: { type: 'string' },
        'batch-size': { type: 'string', default: String(DEFAULT_SPEC.batchSize) },
        'patch-size': { type: 'string', default: String(DEFAULT_SPEC.patchSize) },
        classes: { type: 'string' },
        help: { type: 'boolean', default: false },
      },
    }).values
  } catch (err) {
    console.error(`error: ${(err as Error).message}\n${usage()}`)
    return 1
  }
  if (values.help) {
    console.error(usage())
    return 0
  }
  if (!values.input || !values.labels || !values.out) {
    console.error(`error: --input, --labels and --out are required\n${usage()}`)
    return 1
  }
  const batchSize = Number.parseInt(values['batch-size']!, 10)
  const patchSize = Number.parseInt(values['patch-size']!, 10)
  if (!Number.isInteger(batchSize) || batchSize < 1 || !Number.isInteger(patchSize) || patchSize < 1) {
    console.error('error: --batch-size and --patch-size must be positive integers')
    return 1
  }

  try {
    const result = await extract({
      inputRoot: values.input,
      labelsCsv: values.labels,
      backbone: values.backbone!,
      outDir: values.out,
      batchSize,
      patchSize,
      classNames: values.classes ? values.classes.split(',').map((s) => s.trim()) : undefined,
    })
    const kept = result.slides.length - result.excluded.length
    console.error(
      `extracted ${kept} slides (dim ${result.dim}); manifest at ${result.manifestPath}` +
        (result.excluded.length ? `; excluded: ${result.excluded.join(', ')}` : ''),
    )
    return 0
  } catch (err) {
    const message = (err as Error).message
    console.error(`error: ${message}`)
    const ioLike = /ENOENT|EACCES|EISDIR|ENOTDIR/.test(message)
    return ioLike ? 2 : 1
  }
}

const entry = process.argv[1] ?? ''
if (entry.endsWith('cli.js') || entry.endsWith('extract')) {
  main(process.argv.slice(2)).then((code) => {
    process.exitCode = code
  })
}
