/**
 * Directory-of-patches to slide-pack extraction.
 *
 * The input root holds one sub-directory per slide, each containing patch
 * images (PNG or JPEG). Per slide, patches are embedded in lexicographic
 * filename order and stacked into an n_patches x dim matrix written as a
 * version-1 slide pack; a manifest row is appended per surviving slide.
 * Undecodable images are skipped with a warning and recorded in a skip log;
 * slides with zero valid patches are excluded and listed. Patches that are
 * not patchSize x patchSize are resized (bilinear) and counted in the run
 * metadata.
 */

import { mkdirSync, readdirSync, statSync, writeFileSync } from 'fs'
import { join } from 'path'
import * as tf from '@tensorflow/tfjs'

import { Backbone, loadBackbone } from './backbone.js'
import { DecodedImage, decodeImage, isSupportedImage } from './images.js'
import { ManifestRow, readLabels, writeManifest, writeSlidePack } from './format.js'

export interface ExtractSpec {
  inputRoot: string
  labelsCsv: string
  backbone: string
  outDir: string
  batchSize: number
  /** canonical patch side; inputs of other sizes are resized */
  patchSize: number
  classNames?: string[]
}

export interface SlideOutcome {
  slideId: string
  nPatches: number
  resized: number
  skipped: string[]
}

export interface ExtractResult {
  manifestPath: string
  dim: number
  slides: SlideOutcome[]
  excluded: string[]
  skipLogPath: string
  metadataPath: string
}

export const DEFAULT_SPEC = { batchSize: 8, patchSize: 512 }

function listSlideDirs(root: string): string[] {
  return readdirSync(root)
    .filter((name) => statSync(join(root, name)).isDirectory())
    .sort()
}

function listPatchFiles(slideDir: string): string[] {
  return readdirSync(slideDir)
    .filter((name) => statSync(join(slideDir, name)).isFile() && isSupportedImage(name))
    .sort() // lexicographic order fixes the output row order
}

function toBatchTensor(images: DecodedImage[], patchSize: number): { batch: tf.Tensor4D; resized: number } {
  let resized = 0
  const tensors = images.map((img) => {
    let t = tf.tensor3d(img.data, [img.height, img.width, 3])
    if (img.width !== patchSize || img.height !== patchSize) {
      const scaled = tf.image.resizeBilinear(t, [patchSize, patchSize])
      t.dispose()
      t = scaled
      resized++
    }
    return t
  })
  const batch = tf.stack(tensors) as tf.Tensor4D
  tensors.forEach((t) => t.dispose())
  return { batch, resized }
}

function embedSlide(
  backbone: Backbone,
  slideDir: string,
  files: string[],
  spec: ExtractSpec,
  outcome: SlideOutcome,
): Float32Array | null {
  const rows: Float32Array[] = []
  for (let start = 0; start < files.length; start += spec.batchSize) {
    const chunk = files.slice(start, start + spec.batchSize)
    const images: DecodedImage[] = []
    for (const name of chunk) {
      try {
        images.push(decodeImage(join(slideDir, name)))
      } catch (err) {
        outcome.skipped.push(`${outcome.slideId}/${name}: ${(err as Error).message}`)
        console.error(`warning: skipping undecodable image ${outcome.slideId}/${name}`)
      }
    }
    if (images.length === 0) continue
    const { batch, resized } = toBatchTensor(images, spec.patchSize)
    outcome.resized += resized
    rows.push(backbone.embed(batch))
    batch.dispose()
  }
  if (rows.length === 0) return null
  const dim = backbone.spec.dim
  const total = rows.reduce((n, r) => n + r.length / dim, 0)
  const out = new Float32Array(total * dim)
  let offset = 0
  for (const r of rows) {
    out.set(r, offset)
    offset += r.length
  }
  outcome.nPatches = total
  return out
}

export async function extract(spec: ExtractSpec): Promise<ExtractResult> {
  await tf.setBackend('cpu')
  await tf.ready()
  const labels = readLabels(spec.labelsCsv)
  const backbone = loadBackbone(spec.backbone)
  mkdirSync(spec.outDir, { recursive: true })

  const slideDirs = listSlideDirs(spec.inputRoot)
  if (slideDirs.length === 0) {
    throw new Error(`${spec.inputRoot}: no slide directories`)
  }

  const manifestRows: ManifestRow[] = []
  const slides: SlideOutcome[] = []
  const excluded: string[] = []
  for (const slideId of slideDirs) {
    const label = labels.get(slideId)
    if (label === undefined) {
      throw new Error(`no label for slide ${slideId} in ${spec.labelsCsv}`)
    }
    const outcome: SlideOutcome = { slideId, nPatches: 0, resized: 0, skipped: [] }
    const files = listPatchFiles(join(spec.inputRoot, slideId))
    const embeddings = embedSlide(backbone, join(spec.inputRoot, slideId), files, spec, outcome)
    slides.push(outcome)
    if (embeddings === null) {
      excluded.push(slideId)
      console.error(`error: slide ${slideId} has zero valid patches; excluded`)
      continue
    }
    const relPath = `${slideId}.wsfv`
    writeSlidePack(
      {
        slideId,
        label,
        nPatches: outcome.nPatches,
        dim: backbone.spec.dim,
        embeddings,
      },
      join(spec.outDir, relPath),
    )
    manifestRows.push({
      slideId,
      label,
      path: relPath,
      nPatches: outcome.nPatches,
      dim: backbone.spec.dim,
    })
  }
  backbone.dispose()

  if (manifestRows.length === 0) {
    throw new Error('every slide was excluded; nothing to write')
  }

  const manifestPath = join(spec.outDir, 'manifest.csv')
  writeManifest(manifestRows, manifestPath, spec.classNames)

  const skipLogPath = join(spec.outDir, 'skip_log.txt')
  const allSkips = slides.flatMap((s) => s.skipped)
  writeFileSync(skipLogPath, allSkips.join('\n') + (allSkips.length ? '\n' : ''))

  const metadataPath = join(spec.outDir, 'extract_metadata.json')
  writeFileSync(
    metadataPath,
    JSON.stringify(
      {
        backbone: spec.backbone,
        dim: backbone.spec.dim,
        inputSize: backbone.spec.inputSize,
        patchSize: spec.patchSize,
        slides: Object.fromEntries(
          slides.map((s) => [s.slideId, { n_patches: s.nPatches, resized: s.resized, skipped: s.skipped.length }]),
        ),
        excluded,
      },
      null,
      2,
    ) + '\n',
  )

  return { manifestPath, dim: backbone.spec.dim, slides, excluded, skipLogPath, metadataPath }
}
