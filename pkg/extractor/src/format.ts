/**
 * Slide pack and manifest formats consumed by the fvslide pipeline.
 *
 * A slide pack is: magic "WSFV" | u32 version=1 | u32 n_patches | u32 dim |
 * n_patches*dim float32 values, row-major, all little-endian. The manifest
 * is a CSV with header "slide_id,label,path,n_patches,dim"; class names go
 * in a sibling classes.txt.
 */

import { writeFileSync, readFileSync } from 'fs'
import { join, dirname } from 'path'

export const SLIDEPACK_MAGIC = 'WSFV'
export const FORMAT_VERSION = 1
export const MANIFEST_HEADER = 'slide_id,label,path,n_patches,dim'

export interface SlidePack {
  slideId: string
  label: number
  nPatches: number
  dim: number
  /** row-major (nPatches x dim) */
  embeddings: Float32Array
}

export function encodeSlidePack(pack: SlidePack): Buffer {
  if (pack.nPatches < 1 || pack.dim < 1) {
    throw new Error(`empty slide: ${pack.slideId}`)
  }
  if (pack.embeddings.length !== pack.nPatches * pack.dim) {
    throw new Error(`embedding matrix shape mismatch for ${pack.slideId}`)
  }
  for (const v of pack.embeddings) {
    if (!Number.isFinite(v)) throw new Error(`non-finite embedding in ${pack.slideId}`)
  }
  const buf = Buffer.alloc(16 + 4 * pack.embeddings.length)
  buf.write(SLIDEPACK_MAGIC, 0, 'ascii')
  buf.writeUInt32LE(FORMAT_VERSION, 4)
  buf.writeUInt32LE(pack.nPatches, 8)
  buf.writeUInt32LE(pack.dim, 12)
  for (let i = 0; i < pack.embeddings.length; i++) {
    buf.writeFloatLE(pack.embeddings[i], 16 + 4 * i)
  }
  return buf
}

export function writeSlidePack(pack: SlidePack, path: string): void {
  writeFileSync(path, encodeSlidePack(pack))
}

/** Parse and validate a slide pack file (used by the conformance tests). */
export function readSlidePack(path: string): SlidePack {
  const buf = readFileSync(path)
  if (buf.length < 16) throw new Error(`${path}: truncated`)
  if (buf.toString('ascii', 0, 4) !== SLIDEPACK_MAGIC) {
    throw new Error(`${path}: not a slidepack`)
  }
  const version = buf.readUInt32LE(4)
  if (version !== FORMAT_VERSION) throw new Error(`${path}: unsupported version ${version}`)
  const nPatches = buf.readUInt32LE(8)
  const dim = buf.readUInt32LE(12)
  if (buf.length !== 16 + 4 * nPatches * dim) throw new Error(`${path}: truncated`)
  const embeddings = new Float32Array(nPatches * dim)
  for (let i = 0; i < embeddings.length; i++) {
    embeddings[i] = buf.readFloatLE(16 + 4 * i)
    if (!Number.isFinite(embeddings[i])) throw new Error(`${path}: corrupt embeddings`)
  }
  const stem = path.split('/').pop()!.replace(/\.[^.]+$/, '')
  return { slideId: stem, label: 0, nPatches, dim, embeddings }
}

export interface ManifestRow {
  slideId: string
  label: number
  path: string
  nPatches: number
  dim: number
}

export function writeManifest(rows: ManifestRow[], path: string, classNames?: string[]): void {
  const lines = [MANIFEST_HEADER]
  for (const r of rows) {
    lines.push(`${r.slideId},${r.label},${r.path},${r.nPatches},${r.dim}`)
  }
  writeFileSync(path, lines.join('\n') + '\n')
  if (classNames && classNames.length > 0) {
    writeFileSync(join(dirname(path), 'classes.txt'), classNames.join('\n') + '\n')
  }
}

/** labels CSV: header "slide_id,label", integer class indices. */
export function readLabels(path: string): Map<string, number> {
  const text = readFileSync(path, 'utf-8')
  const lines = text.split(/\r?\n/).filter((l) => l.trim().length > 0)
  if (lines.length === 0 || lines[0].trim() !== 'slide_id,label') {
    throw new Error(`${path}: bad labels header (expected "slide_id,label")`)
  }
  const out = new Map<string, number>()
  for (const line of lines.slice(1)) {
    const [slideId, labelStr] = line.split(',').map((s) => s.trim())
    const label = Number.parseInt(labelStr, 10)
    if (!slideId || !Number.isInteger(label) || label < 0) {
      throw new Error(`${path}: bad labels row: ${line}`)
    }
    if (out.has(slideId)) throw new Error(`${path}: duplicate slide ${slideId}`)
    out.set(slideId, label)
  }
  return out
}
