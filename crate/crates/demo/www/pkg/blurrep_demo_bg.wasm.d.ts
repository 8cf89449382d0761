/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scene_free: (a: number, b: number) => void;
export const scene_blurry_rgba: (a: number) => [number, number];
export const scene_field_rgba: (a: number) => [number, number];
export const scene_input_psnr: (a: number) => number;
export const scene_magnitude_at: (a: number, b: number, c: number) => number;
export const scene_new: (a: bigint, b: number, c: number, d: number) => [number, number, number];
export const scene_psf_rgba: (a: number, b: number, c: number, d: number) => [number, number];
export const scene_set_strength: (a: number, b: number) => [number, number];
export const scene_sharp_rgba: (a: number) => [number, number];
export const scene_size: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
