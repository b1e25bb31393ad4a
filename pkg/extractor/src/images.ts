/** PNG/JPEG decoding to normalized RGB float arrays. */

import { readFileSync } from 'fs'
import { PNG } from 'pngjs'
import jpeg from 'jpeg-js'

export interface DecodedImage {
  width: number
  height: number
  /** HWC, RGB, values in [0, 1] */
  data: Float32Array
}

const PNG_EXTENSIONS = new Set(['.png'])
const JPEG_EXTENSIONS = new Set(['.jpg', '.jpeg'])

export function isSupportedImage(filename: string): boolean {
  const ext = extension(filename)
  return PNG_EXTENSIONS.has(ext) || JPEG_EXTENSIONS.has(ext)
}

function extension(filename: string): string {
  const dot = filename.lastIndexOf('.')
  return dot >= 0 ? filename.slice(dot).toLowerCase() : ''
}

/** Decode a PNG or JPEG file; throws on undecodable input. */
export function decodeImage(path: string): DecodedImage {
  const ext = extension(path)
  const raw = readFileSync(path)
  let width: number
  let height: number
  let rgba: Uint8Array
  if (PNG_EXTENSIONS.has(ext)) {
    const png = PNG.sync.read(raw)
    width = png.width
    height = png.height
    rgba = png.data
  } else if (JPEG_EXTENSIONS.has(ext)) {
    const img = jpeg.decode(raw, { useTArray: true, maxMemoryUsageInMB: 512 })
    width = img.width
    height = img.height
    rgba = img.data
  } else {
    throw new Error(`${path}: unsupported image type ${ext || '(none)'}`)
  }
  const data = new Float32Array(width * height * 3)
  for (let p = 0; p < width * height; p++) {
    data[3 * p] = rgba[4 * p] / 255
    data[3 * p + 1] = rgba[4 * p + 1] / 255
    data[3 * p + 2] = rgba[4 * p + 2] / 255
  }
  return { width, height, data }
}
