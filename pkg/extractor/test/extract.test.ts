/**
 * Extractor conformance tests: sample patch images in, valid slide packs
 * out, bit-reproducible across runs, and the produced manifest drives the
 * downstream pipeline (the fvslide CLI) to completion.
 */

import { mkdirSync, mkdtempSync, readFileSync, writeFileSync, existsSync } from 'fs'
import { tmpdir } from 'os'
import { join } from 'path'
import { spawnSync } from 'child_process'
import { PNG } from 'pngjs'
import jpeg from 'jpeg-js'
import { beforeAll, describe, expect, it } from 'vitest'

import { extract } from '../src/extract.js'
import { main } from '../src/cli.js'
import { encodeSlidePack, readLabels, readSlidePack } from '../src/format.js'

const N_SLIDES = 10
const DIM = 64 // micro-cnn-64 pooled width

function rng(seed: number): () => number {
  let state = seed >>> 0
  return () => {
    state = (state + 0x6d2b79f5) >>> 0
    let t = state
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

function writePng(path: string, size: number, seed: number): void {
  const png = new PNG({ width: size, height: size })
  const rand = rng(seed)
  for (let i = 0; i < size * size; i++) {
    png.data[4 * i] = Math.floor(256 * rand())
    png.data[4 * i + 1] = Math.floor(256 * rand())
    png.data[4 * i + 2] = Math.floor(256 * rand())
    png.data[4 * i + 3] = 255
  }
  writeFileSync(path, PNG.sync.write(png))
}

function writeJpeg(path: string, size: number, seed: number): void {
  const data = Buffer.alloc(size * size * 4)
  const rand = rng(seed)
  for (let i = 0; i < size * size; i++) {
    data[4 * i] = Math.floor(256 * rand())
    data[4 * i + 1] = Math.floor(256 * rand())
    data[4 * i + 2] = Math.floor(256 * rand())
    data[4 * i + 3] = 255
  }
  writeFileSync(path, jpeg.encode({ data, width: size, height: size }, 90).data)
}

/** 10 one-patch slides: PNG/JPEG mix, two undersized, one corrupt extra. */
function makeFixture(slidesRoot: string, labelsPath: string): void {
  for (let i = 0; i < N_SLIDES; i++) {
    const slideDir = join(slidesRoot, `s${i}`)
    mkdirSync(slideDir, { recursive: true })
    const size = i < 2 ? 300 : 512 // undersized patches exercise the resize path
    if (i % 2 === 0) writePng(join(slideDir, 'patch_000.png'), size, 1000 + i)
    else writeJpeg(join(slideDir, 'patch_000.jpg'), size, 1000 + i)
  }
  // an undecodable file in s0: skipped with a log entry, slide survives
  writeFileSync(join(slidesRoot, 's0', 'patch_999.png'), Buffer.from('not really a png'))
  const labels = ['slide_id,label']
  for (let i = 0; i < N_SLIDES; i++) labels.push(`s${i},${i < N_SLIDES / 2 ? 0 : 1}`)
  writeFileSync(labelsPath, labels.join('\n') + '\n')
}

let root: string
let slidesRoot: string
let outA: string
let outB: string

beforeAll(async () => {
  root = mkdtempSync(join(tmpdir(), 'extractor-'))
  slidesRoot = join(root, 'slides')
  makeFixture(slidesRoot, join(root, 'labels.csv'))
  outA = join(root, 'outA')
  outB = join(root, 'outB')
  const spec = {
    inputRoot: slidesRoot,
    labelsCsv: join(root, 'labels.csv'),
    backbone: 'micro-cnn-64',
    batchSize: 4,
    patchSize: 512,
    classNames: ['neg', 'pos'],
  }
  await extract({ ...spec, outDir: outA })
  await extract({ ...spec, outDir: outB })
}, 240_000)

describe('slide pack conformance', () => {
  it('writes one valid pack per slide with the backbone dim', () => {
    for (let i = 0; i < N_SLIDES; i++) {
      const pack = readSlidePack(join(outA, `s${i}.wsfv`))
      expect(pack.nPatches).toBe(1)
      expect(pack.dim).toBe(DIM)
      for (const v of pack.embeddings) expect(Number.isFinite(v)).toBe(true)
    }
  })

  it('stamps the exact header layout', () => {
    const buf = readFileSync(join(outA, 's3.wsfv'))
    expect(buf.toString('ascii', 0, 4)).toBe('WSFV')
    expect(buf.readUInt32LE(4)).toBe(1)
    expect(buf.length).toBe(16 + 4 * 1 * DIM)
  })

  it('writes the manifest with the pipeline header and classes file', () => {
    const lines = readFileSync(join(outA, 'manifest.csv'), 'utf-8').trim().split('\n')
    expect(lines[0]).toBe('slide_id,label,path,n_patches,dim')
    expect(lines.length).toBe(1 + N_SLIDES)
    expect(readFileSync(join(outA, 'classes.txt'), 'utf-8').trim().split('\n')).toEqual(['neg', 'pos'])
  })

  it('records the corrupt patch in the skip log and metadata', () => {
    const skips = readFileSync(join(outA, 'skip_log.txt'), 'utf-8').trim().split('\n')
    expect(skips.length).toBe(1)
    expect(skips[0]).toContain('s0/patch_999.png')
    const meta = JSON.parse(readFileSync(join(outA, 'extract_metadata.json'), 'utf-8'))
    expect(meta.slides.s0.skipped).toBe(1)
    expect(meta.slides.s0.n_patches).toBe(1)
    expect(meta.slides.s0.resized).toBe(1) // the 300x300 patch was resized
    expect(meta.slides.s2.resized).toBe(0)
  })
})

describe('reproducibility', () => {
  it('two runs agree within 1e-5 on every embedding row', () => {
    let worst = 0
    for (let i = 0; i < N_SLIDES; i++) {
      const a = readSlidePack(join(outA, `s${i}.wsfv`)).embeddings
      const b = readSlidePack(join(outB, `s${i}.wsfv`)).embeddings
      expect(a.length).toBe(b.length)
      for (let j = 0; j < a.length; j++) worst = Math.max(worst, Math.abs(a[j] - b[j]))
    }
    expect(worst).toBeLessThanOrEqual(1e-5)
  })

  it('manifests are byte-identical', () => {
    expect(readFileSync(join(outA, 'manifest.csv'))).toEqual(readFileSync(join(outB, 'manifest.csv')))
  })
})

describe('primary pipeline integration', () => {
  it('the produced manifest drives fvslide run to completion', () => {
    const splitRows = ['slide_id,split']
    for (let i = 0; i < N_SLIDES; i++) {
      const cls = i < N_SLIDES / 2 ? i : i - N_SLIDES / 2
      splitRows.push(`s${i},${cls < 3 ? 'train' : cls < 4 ? 'val' : 'test'}`)
    }
    const splitPath = join(root, 'split.csv')
    writeFileSync(splitPath, splitRows.join('\n') + '\n')
    const cfgPath = join(root, 'run.cfg')
    writeFileSync(
      cfgPath,
      `manifest = ${join(outA, 'manifest.csv')}\n` +
        `work_dir = ${join(root, 'work')}\n` +
        `split.file = ${splitPath}\n` +
        'seed = 7\ntrain.epochs = 5\ntrain.hidden = 16\ntrain.attn_dim = 8\n',
    )
    const run = spawnSync('fvslide', ['run', '--config', cfgPath], { encoding: 'utf-8', timeout: 180_000 })
    expect(run.status, run.stderr).toBe(0)
    const metrics = readFileSync(join(root, 'work', 'metrics.csv'), 'utf-8').trim().split('\n')
    expect(metrics[0]).toBe('split,accuracy,auc,precision,recall,f1')
    expect(metrics.length).toBeGreaterThanOrEqual(3) // train/val/test rows
  }, 240_000)
})

describe('cli and edge cases', () => {
  it('rejects unknown backbones', async () => {
    const code = await main([
      '--input', slidesRoot, '--labels', join(root, 'labels.csv'),
      '--backbone', 'resnet-900', '--out', join(root, 'outX'),
    ])
    expect(code).toBe(1)
  })

  it('requires the mandatory flags', async () => {
    expect(await main([])).toBe(1)
  })

  it('missing labels file maps to an I/O exit code', async () => {
    const code = await main([
      '--input', slidesRoot, '--labels', join(root, 'nope.csv'), '--out', join(root, 'outY'),
    ])
    expect(code).toBe(2)
  })

  it('excludes slides whose only patches are undecodable', async () => {
    const badRoot = mkdtempSync(join(tmpdir(), 'extractor-bad-'))
    mkdirSync(join(badRoot, 'slides', 'good'), { recursive: true })
    mkdirSync(join(badRoot, 'slides', 'bad'), { recursive: true })
    writePng(join(badRoot, 'slides', 'good', 'p.png'), 64, 5)
    writeFileSync(join(badRoot, 'slides', 'bad', 'p.png'), Buffer.from('junk'))
    writeFileSync(join(badRoot, 'labels.csv'), 'slide_id,label\ngood,0\nbad,1\n')
    const result = await extract({
      inputRoot: join(badRoot, 'slides'),
      labelsCsv: join(badRoot, 'labels.csv'),
      backbone: 'micro-cnn-64',
      outDir: join(badRoot, 'out'),
      batchSize: 2,
      patchSize: 512,
    })
    expect(result.excluded).toEqual(['bad'])
    expect(existsSync(join(badRoot, 'out', 'good.wsfv'))).toBe(true)
    expect(existsSync(join(badRoot, 'out', 'bad.wsfv'))).toBe(false)
  }, 120_000)

  it('duplicate patch files embed to identical rows', async () => {
    const dupRoot = mkdtempSync(join(tmpdir(), 'extractor-dup-'))
    mkdirSync(join(dupRoot, 'slides', 'twin'), { recursive: true })
    writePng(join(dupRoot, 'slides', 'twin', 'a.png'), 128, 9)
    writeFileSync(join(dupRoot, 'slides', 'twin', 'b.png'), readFileSync(join(dupRoot, 'slides', 'twin', 'a.png')))
    writeFileSync(join(dupRoot, 'labels.csv'), 'slide_id,label\ntwin,0\n')
    await extract({
      inputRoot: join(dupRoot, 'slides'),
      labelsCsv: join(dupRoot, 'labels.csv'),
      backbone: 'micro-cnn-64',
      outDir: join(dupRoot, 'out'),
      batchSize: 2,
      patchSize: 512,
    })
    const pack = readSlidePack(join(dupRoot, 'out', 'twin.wsfv'))
    expect(pack.nPatches).toBe(2)
    const first = pack.embeddings.slice(0, pack.dim)
    const second = pack.embeddings.slice(pack.dim)
    expect(Array.from(second)).toEqual(Array.from(first))
  }, 120_000)

  it('labels parser validates header and duplicates', () => {
    const p = join(root, 'weird.csv')
    writeFileSync(p, 'id,lab\ns0,0\n')
    expect(() => readLabels(p)).toThrow(/bad labels header/)
    writeFileSync(p, 'slide_id,label\ns0,0\ns0,1\n')
    expect(() => readLabels(p)).toThrow(/duplicate/)
  })

  it('pack encoder rejects empty and non-finite payloads', () => {
    expect(() =>
      encodeSlidePack({ slideId: 'x', label: 0, nPatches: 0, dim: 4, embeddings: new Float32Array(0) }),
    ).toThrow(/empty slide/)
    expect(() =>
      encodeSlidePack({ slideId: 'x', label: 0, nPatches: 1, dim: 1, embeddings: Float32Array.of(NaN) }),
    ).toThrow(/non-finite/)
  })
})
